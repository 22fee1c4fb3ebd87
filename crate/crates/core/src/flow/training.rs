use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::{apply_mask, MaskMode, MaskSpec};
use super::path::{conditional_path, target_field, PathParams};
use crate::adapters::{Mode, ParameterPartition};
use crate::error::{Error, Result};
use crate::numerics::{Graph, SeededRng, Tensor, Var};
use crate::optim::Adam;
use crate::transformer::{AcousticInput, Ctx, VectorFieldModel};

/// One utterance prepared for the flow objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Target features, `(frames, feature_dim)`.
    pub x1: Tensor,
    /// Frame-aligned symbol ids.
    pub symbols: Vec<usize>,
    /// Condition token ids; empty for unconditioned training.
    pub condition: Vec<usize>,
    pub mask: MaskSpec,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.x1.rows() != self.symbols.len() {
            return Err(Error::ShapeMismatch {
                op: "training_example",
                lhs: self.x1.shape().to_vec(),
                rhs: vec![self.symbols.len()],
            });
        }
        self.mask.validate()
    }
}

/// Which frames enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskPolicy {
    /// Span masks: masked frames only. Modes `all`/`none`: every frame.
    #[default]
    Infilling,
    AllFrames,
}

impl LossMaskPolicy {
    pub fn frames(&self, mode: MaskMode, mask: &[bool]) -> Vec<bool> {
        let all = vec![true; mask.len()];
        match (self, mode) {
            (LossMaskPolicy::Infilling, MaskMode::Span) if mask.iter().any(|&m| m) => mask.to_vec(),
            _ => all,
        }
    }
}

/// Per-element weights that turn a squared-error sum into the mean over
/// selected frames and feature channels.
fn loss_weights(selected: &[bool], dim: usize) -> Tensor {
    let n_sel = selected.iter().filter(|&&s| s).count().max(1);
    let w = 1.0 / (n_sel * dim.max(1)) as f64;
    let mut out = Tensor::zeros(&[selected.len(), dim]);
    for (f, &s) in selected.iter().enumerate() {
        if s {
            out.row_mut(f).fill(w);
        }
    }
    out
}

/// Mean squared error between the predicted field and the target over the
/// frames chosen by `policy`.
pub fn cfm_loss<'g>(
    ctx: &Ctx<'g, '_>,
    model: &VectorFieldModel,
    example: &TrainingExample,
    t: f64,
    x0: &Tensor,
    path: PathParams,
    policy: LossMaskPolicy,
) -> Result<Var<'g>> {
    example.validate()?;
    let (masked, mask) = apply_mask(&example.x1, &example.mask);
    let psi = conditional_path(x0, &example.x1, t, path)?;
    let target = target_field(x0, &example.x1, path)?;
    let input = AcousticInput {
        t,
        symbols: &example.symbols,
        masked: &masked,
        state: &psi,
    };
    let cond = (!example.condition.is_empty()).then_some(example.condition.as_slice());
    let pred = model.forward(ctx, &input, cond)?;
    let weights = loss_weights(&policy.frames(example.mask.mode, &mask), example.x1.cols());
    let diff = pred.sub(ctx.constant(target))?;
    Ok(diff.square()?.mul(ctx.constant(weights))?.sum())
}

/// [`cfm_loss`] evaluated without recording gradients.
pub fn cfm_loss_value(
    model: &VectorFieldModel,
    example: &TrainingExample,
    t: f64,
    x0: &Tensor,
    path: PathParams,
    policy: LossMaskPolicy,
) -> Result<f64> {
    let graph = Graph::no_grad();
    let ctx = Ctx::eval(&graph, &model.store);
    let loss = cfm_loss(&ctx, model, example, t, x0, path, policy)?;
    Ok(loss.with_value(|v| v.item()))
}

/// Shared body of pre-training and fine-tuning steps. `trainable = None`
/// updates every parameter.
fn train_step(
    model: &mut VectorFieldModel,
    batch: &[TrainingExample],
    opt: &mut Adam,
    rng: &mut SeededRng,
    trainable: Option<&BTreeSet<String>>,
    path: PathParams,
    policy: LossMaskPolicy,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let draws: Vec<(f64, Tensor)> = batch
        .iter()
        .map(|ex| (rng.uniform(), Tensor::randn(ex.x1.shape(), 1.0, rng)))
        .collect();
    let dropout_rng = SeededRng::new(rng.next_u64());
    let graph = Graph::new();
    let ctx = Ctx::train(&graph, &model.store, trainable, dropout_rng);
    let mut total: Option<Var<'_>> = None;
    for (ex, (t, x0)) in batch.iter().zip(&draws) {
        let l = cfm_loss(&ctx, model, ex, *t, x0, path, policy)?;
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(l)?,
        });
    }
    let loss = total.expect("nonempty batch").scale(1.0 / batch.len() as f64);
    let value = loss.with_value(|v| v.item());
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss at optimizer step",
            index: opt.steps_taken() as usize,
        });
    }
    let mut grads = graph.backward(loss)?;
    let grads = ctx.collect_grads(&mut grads);
    drop(ctx);
    opt.apply(&mut model.store, &grads)?;
    Ok(value)
}

/// One optimizer update of every parameter on the batch-mean flow loss,
/// with `t ~ U[0, 1]` and `x0 ~ N(0, I)` drawn per example.
pub fn pretrain_step(
    model: &mut VectorFieldModel,
    batch: &[TrainingExample],
    opt: &mut Adam,
    rng: &mut SeededRng,
    path: PathParams,
    policy: LossMaskPolicy,
) -> Result<f64> {
    train_step(model, batch, opt, rng, None, path, policy)
}

/// Like [`pretrain_step`], but only the partition's trainable set moves.
pub fn finetune_step(
    model: &mut VectorFieldModel,
    partition: &ParameterPartition,
    batch: &[TrainingExample],
    opt: &mut Adam,
    rng: &mut SeededRng,
    path: PathParams,
    policy: LossMaskPolicy,
) -> Result<f64> {
    if model.conditioning.is_none() {
        return Err(Error::NoAdapters("fine-tuning needs injected adapters".into()));
    }
    model.mode = Mode::Train;
    let out = train_step(model, batch, opt, rng, Some(&partition.trainable), path, policy);
    model.mode = Mode::Eval;
    out
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_time_s: f64,
    pub trainable_params: usize,
}

/// Append-only JSON-lines training log.
pub struct TelemetryLog {
    file: File,
}

impl TelemetryLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, record: &TelemetryRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<TelemetryRecord>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}
