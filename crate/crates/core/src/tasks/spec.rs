use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// The annotation a corpus carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Silent frames inserted after a symbol.
    Pause,
    /// A symbol rendered with scaled energy.
    Emphasis,
    /// Oscillating frames inserted after a symbol.
    Burst,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Pause => "pause",
            TaskKind::Emphasis => "emphasis",
            TaskKind::Burst => "burst",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Distinct symbols; the backbone vocabulary must cover them.
    pub n_symbols: usize,
    pub feature_dim: usize,
    /// Seed of the per-symbol patterns and base durations.
    pub pattern_seed: u64,
    /// Per-symbol probability of carrying the annotation.
    pub annotation_rate: f64,
    pub emphasis_scale: f64,
    pub pause_min: usize,
    pub pause_max: usize,
    /// Cycles per frame of the inserted oscillation.
    pub burst_frequency: f64,
    pub burst_amplitude: f64,
    pub burst_frames: usize,
    pub noise_std: f64,
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Required minimum L2 distance between any two patterns.
    pub pattern_margin: f64,
}

impl TaskSpec {
    pub fn desk(task: TaskKind) -> Self {
        Self {
            task,
            n_symbols: 12,
            feature_dim: 8,
            pattern_seed: 7,
            annotation_rate: 0.5,
            emphasis_scale: 2.0,
            pause_min: 2,
            pause_max: 4,
            burst_frequency: 0.25,
            burst_amplitude: 1.5,
            burst_frames: 4,
            noise_std: 0.05,
            min_symbols: 3,
            max_symbols: 6,
            pattern_margin: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("task spec: {m}")));
        if self.feature_dim < 2 {
            return fail("feature_dim must be >= 2");
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return fail("need 1 <= min_symbols <= max_symbols");
        }
        if self.max_symbols > self.n_symbols {
            return fail("max_symbols exceeds n_symbols (symbols are drawn without repetition)");
        }
        if !(0.0..=1.0).contains(&self.annotation_rate) {
            return fail("annotation_rate outside [0, 1]");
        }
        if self.pause_min < 2 || self.pause_min > self.pause_max {
            return fail("need 2 <= pause_min <= pause_max");
        }
        if self.burst_frames < 2 || self.burst_frequency <= 0.0 || self.burst_frequency >= 0.5 {
            return fail("burst needs >= 2 frames and a frequency in (0, 0.5)");
        }
        if self.emphasis_scale <= 1.0 / 0.7 {
            return fail("emphasis_scale too small to detect");
        }
        if self.noise_std < 0.0 || self.pattern_margin < 0.0 {
            return fail("negative noise_std or pattern_margin");
        }
        Ok(())
    }

    pub fn patterns(&self) -> Result<BasePatterns> {
        BasePatterns::generate(self)
    }

    /// Longest possible rendering in frames.
    pub fn max_frames(&self) -> usize {
        let extra = self.pause_max.max(self.burst_frames);
        self.max_symbols * (6 + extra)
    }
}

/// Per-symbol frame patterns (zero channel mean, unit RMS) and base
/// durations.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePatterns {
    pub patterns: Vec<Vec<f64>>,
    pub durations: Vec<usize>,
}

impl BasePatterns {
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::derived(spec.pattern_seed, 0x9a77);
        for _ in 0..1000 {
            let patterns: Vec<Vec<f64>> = (0..spec.n_symbols)
                .map(|_| unit_pattern(spec.feature_dim, &mut rng))
                .collect();
            if min_pairwise_distance(&patterns) >= spec.pattern_margin {
                let durations = (0..spec.n_symbols).map(|_| rng.int_inclusive(3, 5)).collect();
                return Ok(Self { patterns, durations });
            }
        }
        Err(Error::Config(format!(
            "no pattern set with margin {} found",
            spec.pattern_margin
        )))
    }

    pub fn min_distance(&self) -> f64 {
        min_pairwise_distance(&self.patterns)
    }
}

fn unit_pattern(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let mean = v.iter().sum::<f64>() / dim as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / dim as f64).sqrt();
    v.iter_mut().for_each(|x| *x /= rms);
    v
}

fn min_pairwise_distance(p: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let d: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}
