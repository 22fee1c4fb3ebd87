use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of the conditional probability path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathParams {
    pub sigma_min: f64,
}

impl Default for PathParams {
    fn default() -> Self {
        Self { sigma_min: 1e-5 }
    }
}

impl PathParams {
    pub fn new(sigma_min: f64) -> Result<Self> {
        let p = Self { sigma_min };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config(format!("sigma_min {} outside (0, 1)", self.sigma_min)));
        }
        Ok(())
    }
}

/// `ψ_t = (1 − (1 − σ_min)·t)·x0 + t·x1`.
pub fn conditional_path(x0: &Tensor, x1: &Tensor, t: f64, params: PathParams) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    // same coefficient as 1 − (1 − σ)t, written so both endpoints are exact
    let a = (1.0 - t) + params.sigma_min * t;
    x0.zip_map(x1, "conditional_path", |p, q| a * p + t * q)
}

/// Regression target `x1 − (1 − σ_min)·x0`; independent of `t`.
pub fn target_field(x0: &Tensor, x1: &Tensor, params: PathParams) -> Result<Tensor> {
    let c = 1.0 - params.sigma_min;
    x0.zip_map(x1, "target_field", |p, q| q - c * p)
}
