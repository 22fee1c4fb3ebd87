use super::corpus::Annotation;
use super::spec::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Root-mean-square over the channels of one frame.
pub fn frame_energy(frame: &[f64]) -> f64 {
    (frame.iter().map(|x| x * x).sum::<f64>() / frame.len().max(1) as f64).sqrt()
}

/// Rule-based annotator for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub spec: TaskSpec,
    /// Median per-symbol energy of unannotated speech.
    pub reference_energy: f64,
}

impl Detector {
    /// Reference energy from the clean, unannotated symbol patterns.
    pub fn for_spec(spec: &TaskSpec) -> Result<Self> {
        let patterns = spec.patterns()?;
        let energies: Vec<f64> = patterns.patterns.iter().map(|p| frame_energy(p)).collect();
        Ok(Self {
            spec: spec.clone(),
            reference_energy: median(energies),
        })
    }

    /// Reference energy measured on a set of unannotated renderings, each
    /// given as features plus per-symbol frame counts.
    pub fn calibrate<'a>(
        spec: &TaskSpec,
        renders: impl IntoIterator<Item = (&'a Tensor, &'a [usize])>,
    ) -> Result<Self> {
        let mut energies = Vec::new();
        for (features, durations) in renders {
            for span in spans(features, durations)? {
                energies.push(voiced_energy(features, span, 0.0));
            }
        }
        if energies.is_empty() {
            return Err(Error::invalid("no symbols to calibrate on"));
        }
        Ok(Self {
            spec: spec.clone(),
            reference_energy: median(energies),
        })
    }

    pub fn silence_threshold(&self) -> f64 {
        0.3 * self.reference_energy
    }

    pub fn emphasis_threshold(&self) -> f64 {
        0.7 * self.spec.emphasis_scale * self.reference_energy
    }

    pub fn burst_threshold(&self) -> f64 {
        self.spec.burst_amplitude / 4.0
    }

    /// Mean energy of the non-silent frames of each symbol.
    pub fn symbol_energies(&self, features: &Tensor, durations: &[usize]) -> Result<Vec<f64>> {
        let silence = self.silence_threshold();
        Ok(spans(features, durations)?
            .into_iter()
            .map(|s| voiced_energy(features, s, silence))
            .collect())
    }

    /// Annotations of the spec's task found in `features`, where symbol `i`
    /// spans `durations[i]` frames.
    pub fn detect(&self, features: &Tensor, durations: &[usize]) -> Result<Vec<Annotation>> {
        let spans = spans(features, durations)?;
        let mut out = Vec::new();
        for (position, &(start, end)) in spans.iter().enumerate() {
            let hit = match self.spec.task {
                TaskKind::Emphasis => {
                    voiced_energy(features, (start, end), self.silence_threshold()) >= self.emphasis_threshold()
                }
                TaskKind::Pause => self.longest_silence(features, start, end) >= 2,
                TaskKind::Burst => self.burst_strength(features, start, end) >= self.burst_threshold(),
            };
            if hit {
                out.push(Annotation {
                    position,
                    kind: self.spec.task,
                });
            }
        }
        Ok(out)
    }

    fn longest_silence(&self, features: &Tensor, start: usize, end: usize) -> usize {
        let threshold = self.silence_threshold();
        let (mut run, mut best) = (0, 0);
        for f in start..end {
            if frame_energy(features.row(f)) < threshold {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
        best
    }

    /// Largest amplitude estimate at the burst frequency over windows of
    /// `burst_frames` of the channel-mean signal.
    pub fn burst_strength(&self, features: &Tensor, start: usize, end: usize) -> f64 {
        let w = self.spec.burst_frames;
        if end - start < w {
            return 0.0;
        }
        let mean: Vec<f64> = (start..end)
            .map(|f| features.row(f).iter().sum::<f64>() / features.cols() as f64)
            .collect();
        let omega = std::f64::consts::TAU * self.spec.burst_frequency;
        let mut best: f64 = 0.0;
        for s in 0..=mean.len() - w {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, m) in mean[s..s + w].iter().enumerate() {
                re += m * (omega * j as f64).cos();
                im -= m * (omega * j as f64).sin();
            }
            best = best.max(2.0 * (re * re + im * im).sqrt() / w as f64);
        }
        best
    }
}

/// Convenience wrapper: detection with the spec's default reference.
pub fn detect_annotations(features: &Tensor, durations: &[usize], spec: &TaskSpec) -> Result<Vec<Annotation>> {
    Detector::for_spec(spec)?.detect(features, durations)
}

fn spans(features: &Tensor, durations: &[usize]) -> Result<Vec<(usize, usize)>> {
    let total: usize = durations.iter().sum();
    if total != features.rows() {
        return Err(Error::ShapeMismatch {
            op: "detect_annotations",
            lhs: features.shape().to_vec(),
            rhs: vec![total],
        });
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut f = 0;
    for &d in durations {
        out.push((f, f + d));
        f += d;
    }
    Ok(out)
}

fn voiced_energy(features: &Tensor, (start, end): (usize, usize), silence: f64) -> f64 {
    let voiced: Vec<f64> = (start..end)
        .map(|f| frame_energy(features.row(f)))
        .filter(|&e| e >= silence)
        .collect();
    if voiced.is_empty() {
        0.0
    } else {
        voiced.iter().sum::<f64>() / voiced.len() as f64
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
