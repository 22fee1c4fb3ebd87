use serde::{Deserialize, Serialize};

use crate::numerics::{SeededRng, Tensor};

/// Two equally likely clusters of constant frames at `+offset` and
/// `-offset`, used to check that sampling covers both modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoModeTask {
    pub frames: usize,
    pub feature_dim: usize,
    pub offset: f64,
    pub noise_std: f64,
    /// Symbol id shared by every frame.
    pub symbol: usize,
}

impl Default for TwoModeTask {
    fn default() -> Self {
        Self {
            frames: 8,
            feature_dim: 8,
            offset: 1.0,
            noise_std: 0.2,
            symbol: 0,
        }
    }
}

impl TwoModeTask {
    /// A sample and its mode (`true` for the positive cluster).
    pub fn sample(&self, rng: &mut SeededRng) -> (Tensor, bool) {
        let positive = rng.bernoulli(0.5);
        let centre = if positive { self.offset } else { -self.offset };
        let mut t = Tensor::zeros(&[self.frames, self.feature_dim]);
        for x in t.data_mut() {
            *x = centre + self.noise_std * rng.normal();
        }
        (t, positive)
    }

    pub fn symbols(&self) -> Vec<usize> {
        vec![self.symbol; self.frames]
    }

    /// Nearest mode by the sign of the overall mean.
    pub fn classify(&self, features: &Tensor) -> bool {
        features.sum() >= 0.0
    }

    /// Fraction of samples in the positive mode.
    pub fn positive_fraction(&self, samples: &[Tensor]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples.iter().filter(|s| self.classify(s)).count() as f64 / samples.len() as f64
    }
}
