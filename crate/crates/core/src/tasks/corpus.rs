use serde::{Deserialize, Serialize};

use super::spec::{BasePatterns, TaskKind, TaskSpec};
use crate::adapters::{Vocab, BURST_TOKEN, EMPHASIS_MARK, PAUSE_TOKEN};
use crate::duration::expand_to_alignment;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, SeededRng, Tensor};

const HOLDOUT_SALT: u64 = 0x401d;
const NOISE_SALT: u64 = 0x7015e;

/// An annotation attached to the symbol at `position`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub position: usize,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub symbols: Vec<usize>,
    /// Sorted by position.
    pub annotations: Vec<Annotation>,
    /// Frames each symbol's pattern occupies.
    pub durations: Vec<usize>,
    /// Frames inserted after each symbol (pause or burst).
    pub inserted: Vec<usize>,
    /// `(frames, feature_dim)`.
    pub features: Tensor,
}

impl Utterance {
    /// Frames per symbol including the frames inserted after it.
    pub fn aligned_durations(&self) -> Vec<usize> {
        self.durations.iter().zip(&self.inserted).map(|(d, i)| d + i).collect()
    }

    pub fn frames(&self) -> usize {
        self.aligned_durations().iter().sum()
    }

    /// Symbol id of every frame.
    pub fn frame_symbols(&self) -> Vec<usize> {
        expand_to_alignment(&self.symbols, &self.aligned_durations()).expect("durations are positive")
    }

    pub fn z_f(&self) -> String {
        serialize_z_f(&self.symbols, &self.annotations)
    }

    pub fn has(&self, position: usize, kind: TaskKind) -> bool {
        self.annotations.contains(&Annotation { position, kind })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.symbols.len();
        if n == 0 || self.durations.len() != n || self.inserted.len() != n {
            return Err(Error::invalid(format!("utterance {}: inconsistent lengths", self.id)));
        }
        if self.durations.contains(&0) {
            return Err(Error::invalid(format!("utterance {}: zero duration", self.id)));
        }
        if self.annotations.iter().any(|a| a.position >= n) {
            return Err(Error::invalid(format!(
                "utterance {}: annotation past the end",
                self.id
            )));
        }
        if self.features.rows() != self.frames() {
            return Err(Error::invalid(format!(
                "utterance {}: {} feature frames for {} aligned frames",
                self.id,
                self.features.rows(),
                self.frames()
            )));
        }
        Ok(())
    }
}

pub fn symbol_word(id: usize) -> String {
    format!("w{id}")
}

/// Condition vocabulary for a task's symbols.
pub fn word_vocab(n_symbols: usize) -> Vocab {
    Vocab::for_symbols(n_symbols, symbol_word)
}

/// `*w3*` marks emphasis; `<pause>` and `<burst>` follow their symbol.
pub fn serialize_z_f(symbols: &[usize], annotations: &[Annotation]) -> String {
    let mut words = Vec::with_capacity(symbols.len());
    for (i, &s) in symbols.iter().enumerate() {
        let has = |k| annotations.contains(&Annotation { position: i, kind: k });
        let w = symbol_word(s);
        if has(TaskKind::Emphasis) {
            words.push(format!("{EMPHASIS_MARK}{w}{EMPHASIS_MARK}"));
        } else {
            words.push(w);
        }
        if has(TaskKind::Pause) {
            words.push(PAUSE_TOKEN.to_string());
        }
        if has(TaskKind::Burst) {
            words.push(BURST_TOKEN.to_string());
        }
    }
    words.join(" ")
}

pub fn parse_z_f(text: &str) -> Result<(Vec<usize>, Vec<Annotation>)> {
    let mut symbols = Vec::new();
    let mut annotations = Vec::new();
    for tok in text.split_whitespace() {
        let marker = match tok {
            PAUSE_TOKEN => Some(TaskKind::Pause),
            BURST_TOKEN => Some(TaskKind::Burst),
            _ => None,
        };
        if let Some(kind) = marker {
            let position = symbols
                .len()
                .checked_sub(1)
                .ok_or_else(|| Error::invalid(format!("`{tok}` before any word")))?;
            annotations.push(Annotation { position, kind });
            continue;
        }
        let (word, emphasized) = match tok
            .strip_prefix(EMPHASIS_MARK)
            .and_then(|t| t.strip_suffix(EMPHASIS_MARK))
        {
            Some(inner) => (inner, true),
            None => (tok, false),
        };
        let id = word
            .strip_prefix('w')
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| Error::UnknownToken(tok.to_string()))?;
        if emphasized {
            annotations.push(Annotation {
                position: symbols.len(),
                kind: TaskKind::Emphasis,
            });
        }
        symbols.push(id);
    }
    annotations.sort();
    Ok((symbols, annotations))
}

/// Draws symbols, durations and annotations for one utterance and renders
/// it with noise. `annotate = false` forces an unannotated utterance.
pub fn generate_utterance(
    spec: &TaskSpec,
    patterns: &BasePatterns,
    id: String,
    annotate: bool,
    rng: &mut SeededRng,
) -> Result<Utterance> {
    let n = rng.int_inclusive(spec.min_symbols, spec.max_symbols);
    let mut pool: Vec<usize> = (0..spec.n_symbols).collect();
    let mut symbols = Vec::with_capacity(n);
    for _ in 0..n {
        symbols.push(pool.swap_remove(rng.below(pool.len())));
    }
    let durations: Vec<usize> = symbols
        .iter()
        .map(|&s| {
            let jitter = [-1i64, 0, 0, 1][rng.below(4)];
            (patterns.durations[s] as i64 + jitter).max(1) as usize
        })
        .collect();
    let mut annotations = Vec::new();
    let mut inserted = vec![0; n];
    for (position, extra) in inserted.iter_mut().enumerate() {
        if annotate && rng.bernoulli(spec.annotation_rate) {
            annotations.push(Annotation {
                position,
                kind: spec.task,
            });
            *extra = match spec.task {
                TaskKind::Pause => rng.int_inclusive(spec.pause_min, spec.pause_max),
                TaskKind::Burst => spec.burst_frames,
                TaskKind::Emphasis => 0,
            };
        }
    }
    let mut utt = Utterance {
        id,
        symbols,
        annotations,
        durations,
        inserted,
        features: Tensor::zeros(&[0, spec.feature_dim]),
    };
    let noise_seed = rng.next_u64();
    utt.features = render_with(&utt, spec, patterns, Some(noise_seed))?;
    Ok(utt)
}

/// Renders `utt`. `noise_seed = None` gives the clean rendering.
pub fn render_features(utt: &Utterance, spec: &TaskSpec, noise_seed: Option<u64>) -> Result<Tensor> {
    render_with(utt, spec, &spec.patterns()?, noise_seed)
}

fn render_with(utt: &Utterance, spec: &TaskSpec, patterns: &BasePatterns, noise_seed: Option<u64>) -> Result<Tensor> {
    let frames: usize = utt.aligned_durations().iter().sum();
    let d = spec.feature_dim;
    let mut out = Tensor::zeros(&[frames, d]);
    let mut f = 0;
    for (i, &s) in utt.symbols.iter().enumerate() {
        let pattern = patterns
            .patterns
            .get(s)
            .ok_or_else(|| Error::invalid(format!("symbol {s} outside the task's {}", spec.n_symbols)))?;
        let gain = if utt.has(i, TaskKind::Emphasis) {
            spec.emphasis_scale
        } else {
            1.0
        };
        for _ in 0..utt.durations[i] {
            for (o, p) in out.row_mut(f).iter_mut().zip(pattern) {
                *o = gain * p;
            }
            f += 1;
        }
        let burst = utt.has(i, TaskKind::Burst);
        for j in 0..utt.inserted[i] {
            if burst {
                let v = spec.burst_amplitude * (std::f64::consts::TAU * spec.burst_frequency * (j as f64 + 0.5)).sin();
                out.row_mut(f).fill(v);
            }
            f += 1;
        }
    }
    if let Some(seed) = noise_seed {
        let mut rng = SeededRng::derived(seed, NOISE_SALT);
        for x in out.data_mut() {
            *x += spec.noise_std * rng.normal();
        }
    }
    Ok(out)
}

/// Training and held-out utterances of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: TaskSpec,
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.heldout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.heldout)
    }
}

/// Utterance `i` uses its own derived stream and lands in the held-out
/// split when a seed-derived hash of `i` is divisible by five.
pub fn generate_corpus(spec: &TaskSpec, n_utterances: usize, seed: u64) -> Result<Corpus> {
    if n_utterances == 0 {
        return Err(Error::invalid("corpus needs at least one utterance"));
    }
    let patterns = spec.patterns()?;
    let mut corpus = Corpus {
        spec: spec.clone(),
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for i in 0..n_utterances {
        let mut rng = SeededRng::derived(seed, i as u64);
        let utt = generate_utterance(spec, &patterns, format!("{}-{i:05}", spec.task.name()), true, &mut rng)?;
        if is_heldout(seed, i) {
            corpus.heldout.push(utt);
        } else {
            corpus.train.push(utt);
        }
    }
    Ok(corpus)
}

fn is_heldout(seed: u64, i: usize) -> bool {
    derive_seed(seed ^ HOLDOUT_SALT, i as u64) % 5 == 0
}
