//! Fixed-step ODE integration of the learned field and generation on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::masked_with_indicator;
use crate::numerics::{Graph, SeededRng, Tensor};
use crate::transformer::{AcousticInput, Ctx, VectorFieldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub n_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Midpoint,
            n_steps: 32,
        }
    }
}

impl SolverConfig {
    pub fn new(method: SolverMethod, n_steps: usize) -> Result<Self> {
        let c = Self { method, n_steps };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything that yields a velocity for a state at time `t`.
pub trait VelocityField {
    fn velocity(&self, t: f64, x: &Tensor) -> Result<Tensor>;
}

impl<F: Fn(f64, &Tensor) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        self(t, x)
    }
}

/// Solves `dx/dt = v(t, x)` from `t = 0` to `t = 1` with `h = 1/n_steps`.
pub fn integrate(field: &dyn VelocityField, x0: &Tensor, solver: SolverConfig) -> Result<Tensor> {
    solver.validate()?;
    let h = 1.0 / solver.n_steps as f64;
    let mut x = x0.clone();
    for step in 0..solver.n_steps {
        let t = step as f64 * h;
        let v = match solver.method {
            SolverMethod::Euler => field.velocity(t, &x)?,
            SolverMethod::Midpoint => {
                let mut mid = x.clone();
                mid.add_scaled(&field.velocity(t, &x)?, 0.5 * h);
                field.velocity((t + 0.5 * h).min(1.0), &mid)?
            }
        };
        x.add_scaled(&v, h);
        if x.first_non_finite().is_some() {
            return Err(Error::NonFinite {
                what: "ode state after step",
                index: step,
            });
        }
    }
    Ok(x)
}

/// The model's field with its context held fixed across steps.
pub struct ModelField<'a> {
    pub model: &'a VectorFieldModel,
    pub symbols: &'a [usize],
    /// Masked features with indicator channel.
    pub masked: &'a Tensor,
    /// Projected condition sequence, computed once.
    pub condition: Option<&'a Tensor>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let graph = Graph::no_grad();
        let ctx = Ctx::eval(&graph, &self.model.store);
        let input = AcousticInput {
            t,
            symbols: self.symbols,
            masked: self.masked,
            state: x,
        };
        let cond = self.condition.map(|c| ctx.constant(c.clone()));
        let v = self.model.forward_with_context(&ctx, &input, cond)?;
        Ok((*v.value()).clone())
    }
}

/// What to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Frame-aligned symbol ids.
    pub symbols: Vec<usize>,
    /// Annotated transcript; empty for none.
    pub z_f: String,
    /// Known leading frames `(prompt_len, feature_dim)`.
    pub prompt: Option<Tensor>,
    pub solver: SolverConfig,
    pub seed: u64,
}

/// Samples `x0 ~ N(0, I)` and integrates to `t = 1`. Prompt frames are
/// visible context and are copied verbatim into the output.
pub fn generate(model: &VectorFieldModel, request: &GenerationRequest) -> Result<Tensor> {
    let frames = request.symbols.len();
    let d = model.config.feature_dim;
    let condition = if request.z_f.trim().is_empty() {
        None
    } else {
        let c = model
            .conditioning
            .as_ref()
            .ok_or_else(|| Error::NoAdapters("z_f given but the model has no condition pathway".into()))?;
        Some(c.encode_condition(&model.store, &request.z_f)?)
    };
    let mut context = Tensor::zeros(&[frames, d]);
    let mut mask = vec![true; frames];
    if let Some(p) = &request.prompt {
        if p.rows() >= frames || p.cols() != d {
            return Err(Error::invalid(format!(
                "prompt of shape {:?} for a {frames}-frame request",
                p.shape()
            )));
        }
        for f in 0..p.rows() {
            context.row_mut(f).copy_from_slice(p.row(f));
            mask[f] = false;
        }
    }
    let masked = masked_with_indicator(&context, &mask);
    let mut rng = SeededRng::new(request.seed);
    let x0 = Tensor::randn(&[frames, d], 1.0, &mut rng);
    let field = ModelField {
        model,
        symbols: &request.symbols,
        masked: &masked,
        condition: condition.as_ref(),
    };
    let mut out = integrate(&field, &x0, request.solver)?;
    if let Some(p) = &request.prompt {
        for f in 0..p.rows() {
            out.row_mut(f).copy_from_slice(p.row(f));
        }
    }
    Ok(out)
}
