use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    All,
    Span,
    None,
}

/// Which frames of `x1` are hidden from the model. Span bounds are
/// fractions of the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub start: f64,
    pub length: f64,
}

impl MaskSpec {
    pub fn all() -> Self {
        Self {
            mode: MaskMode::All,
            start: 0.0,
            length: 1.0,
        }
    }

    pub fn none() -> Self {
        Self {
            mode: MaskMode::None,
            start: 0.0,
            length: 0.0,
        }
    }

    pub fn span(start: f64, length: f64) -> Result<Self> {
        let s = Self {
            mode: MaskMode::Span,
            start,
            length,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.start) && (0.0..=1.0).contains(&self.length);
        if !ok || self.start + self.length > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "mask span start {} length {} outside [0, 1]",
                self.start, self.length
            )));
        }
        Ok(())
    }

    /// Training-time mask: everything with probability 0.3, otherwise a
    /// span covering 70–100% of the sequence.
    pub fn sample(rng: &mut SeededRng) -> Self {
        if rng.bernoulli(0.3) {
            return Self::all();
        }
        let length = rng.uniform_range(0.7, 1.0);
        let start = rng.uniform_range(0.0, 1.0 - length);
        Self {
            mode: MaskMode::Span,
            start,
            length,
        }
    }

    /// `true` for each masked frame.
    pub fn frames(&self, n: usize) -> Vec<bool> {
        match self.mode {
            MaskMode::All => vec![true; n],
            MaskMode::None => vec![false; n],
            MaskMode::Span => {
                let start = ((self.start * n as f64).floor() as usize).min(n);
                let count = (self.length * n as f64).floor() as usize;
                let end = (start + count).min(n);
                (0..n).map(|i| i >= start && i < end).collect()
            }
        }
    }
}

/// Masked features with an indicator channel appended: a masked frame is
/// all zeros with indicator 1; a visible frame is `x1` with indicator 0.
pub fn apply_mask(x1: &Tensor, spec: &MaskSpec) -> (Tensor, Vec<bool>) {
    let mask = spec.frames(x1.rows());
    (masked_with_indicator(x1, &mask), mask)
}

pub fn masked_with_indicator(x1: &Tensor, mask: &[bool]) -> Tensor {
    let (n, d) = (x1.rows(), x1.cols());
    let mut out = Tensor::zeros(&[n, d + 1]);
    for (f, &m) in mask.iter().enumerate().take(n) {
        let row = out.row_mut(f);
        if m {
            row[d] = 1.0;
        } else {
            row[..d].copy_from_slice(x1.row(f));
        }
    }
    out
}
