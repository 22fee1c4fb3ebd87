//! Per-symbol duration regression and frame alignment.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adaptable, AdaptableParts, Conditioning, Mode, ParameterPartition};
use crate::error::{Error, Result};
use crate::numerics::{Graph, SeededRng, Tensor, Var};
use crate::optim::Adam;
use crate::transformer::{one_hot_embed, Ctx, Init, Linear, ParamStore, TransformerStack};

const PREFIX: &str = "dur.";
const SYMBOL_EMBEDDING: &str = "dur.sym_emb";
const POSITION_EMBEDDING: &str = "dur.pos_emb";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Longest symbol sequence.
    pub max_symbols: usize,
}

impl DurationConfig {
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            model_dim: 32,
            ff_dim: 128,
            n_heads: 4,
            vocab_size: 16,
            max_symbols: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_layers: 8,
            model_dim: 512,
            ff_dim: 2048,
            n_heads: 8,
            vocab_size: 80,
            max_symbols: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "duration model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_symbols == 0 {
            return Err(Error::Config("duration model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One training pair: symbols with their gold frame counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationExample {
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    /// Condition token ids; empty when unconditioned.
    pub condition: Vec<usize>,
}

impl DurationExample {
    pub fn validate(&self) -> Result<()> {
        if self.symbols.is_empty() || self.symbols.len() != self.durations.len() {
            return Err(Error::invalid(format!(
                "{} symbols with {} durations",
                self.symbols.len(),
                self.durations.len()
            )));
        }
        if self.durations.contains(&0) {
            return Err(Error::invalid("gold durations must be >= 1"));
        }
        Ok(())
    }
}

/// Transformer regressor from unaligned symbols to frames per symbol.
#[derive(Debug, Clone)]
pub struct DurationModel {
    pub config: DurationConfig,
    pub store: ParamStore,
    pub stack: TransformerStack,
    pub head: Linear,
    pub conditioning: Option<Conditioning>,
    pub mode: Mode,
}

impl DurationModel {
    pub fn new(config: DurationConfig, seed: u64) -> Result<Self> {
        Self::build(config, ParamStore::new(), seed)
    }

    pub fn shapes_only(config: DurationConfig) -> Result<Self> {
        Self::build(config, ParamStore::shapes_only(), 0)
    }

    fn build(config: DurationConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derived(seed, 0xd0);
        let c = &config;
        store.declare(
            SYMBOL_EMBEDDING,
            &[c.vocab_size, c.model_dim],
            Init::Normal(1.0),
            &mut rng,
        )?;
        store.declare(
            POSITION_EMBEDDING,
            &[c.max_symbols, c.model_dim],
            Init::Normal(0.1),
            &mut rng,
        )?;
        let stack = TransformerStack::declare(
            &mut store,
            PREFIX,
            c.n_layers,
            c.model_dim,
            c.ff_dim,
            c.n_heads,
            &mut rng,
        )?;
        let head = Linear::declare(&mut store, "dur.head", c.model_dim, 1, &mut rng)?;
        Ok(Self {
            config,
            store,
            stack,
            head,
            conditioning: None,
            mode: Mode::Eval,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total()
    }

    /// Starts the regression at `mean` frames for every symbol.
    pub fn set_output_offset(&mut self, mean: f64) -> Result<()> {
        self.store.get_mut(&self.head.bias())?.data_mut().fill(mean);
        Ok(())
    }

    /// Raw real-valued durations, `(symbols, 1)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, symbols: &[usize], condition: Option<&[usize]>) -> Result<Var<'g>> {
        if symbols.is_empty() {
            return Err(Error::invalid("empty symbol sequence"));
        }
        if symbols.len() > self.config.max_symbols {
            return Err(Error::invalid(format!(
                "{} symbols exceed max_symbols {}",
                symbols.len(),
                self.config.max_symbols
            )));
        }
        let cond = match condition {
            None => None,
            Some(tokens) => {
                let c = self
                    .conditioning
                    .as_ref()
                    .ok_or_else(|| Error::NoAdapters("z_f given to a duration model without adapters".into()))?;
                Some(c.context(ctx, tokens)?)
            }
        };
        let x = one_hot_embed(ctx, SYMBOL_EMBEDDING, self.config.vocab_size, symbols)?;
        let pos = ctx.param(POSITION_EMBEDDING)?.slice_rows(0, symbols.len())?;
        let h = self.stack.forward(ctx, x.add(pos)?, cond)?;
        self.head.forward(ctx, h)
    }

    /// Raw predictions for `symbols`, optionally conditioned on the
    /// annotated transcript `z_f`.
    pub fn predict_raw(&self, symbols: &[usize], z_f: Option<&str>) -> Result<Vec<f64>> {
        let tokens = match z_f {
            Some(text) => {
                let c = self
                    .conditioning
                    .as_ref()
                    .ok_or_else(|| Error::NoAdapters("z_f given to a duration model without adapters".into()))?;
                Some(c.tokenize(text)?)
            }
            None => None,
        };
        let graph = Graph::no_grad();
        let ctx = Ctx::eval(&graph, &self.store);
        let out = self.forward(&ctx, symbols, tokens.as_deref())?;
        let v = out.value();
        Ok(v.data().to_vec())
    }

    /// Integer frame counts, each at least one.
    pub fn predict_durations(&self, symbols: &[usize], z_f: Option<&str>) -> Result<Vec<usize>> {
        Ok(self
            .predict_raw(symbols, z_f)?
            .into_iter()
            .map(round_duration)
            .collect())
    }
}

impl Adaptable for DurationModel {
    fn parts_mut(&mut self) -> AdaptableParts<'_> {
        AdaptableParts {
            store: &mut self.store,
            stack: &mut self.stack,
            extra_linears: vec![&mut self.head],
            conditioning: &mut self.conditioning,
            model_dim: self.config.model_dim,
            mode: self.mode,
        }
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn stack(&self) -> &TransformerStack {
        &self.stack
    }

    fn conditioning(&self) -> Option<&Conditioning> {
        self.conditioning.as_ref()
    }
}

/// Clamps to at least one frame and rounds half to even.
pub fn round_duration(raw: f64) -> usize {
    if raw.is_nan() {
        return 1;
    }
    raw.max(1.0).round_ties_even() as usize
}

/// Mean absolute error between raw predictions and gold counts.
pub fn duration_loss(predictions: &[f64], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::ShapeMismatch {
            op: "duration_loss",
            lhs: vec![predictions.len()],
            rhs: vec![gold.len()],
        });
    }
    if gold.is_empty() {
        return Err(Error::invalid("empty duration sequence"));
    }
    let total: f64 = predictions.iter().zip(gold).map(|(p, &g)| (p - g as f64).abs()).sum();
    Ok(total / gold.len() as f64)
}

/// Repeats each item by its duration, in order.
pub fn expand_to_alignment<T: Clone>(items: &[T], durations: &[usize]) -> Result<Vec<T>> {
    if items.len() != durations.len() {
        return Err(Error::ShapeMismatch {
            op: "expand_to_alignment",
            lhs: vec![items.len()],
            rhs: vec![durations.len()],
        });
    }
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(Error::invalid(format!("duration of symbol {i} is 0")));
    }
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (item, &d) in items.iter().zip(durations) {
        out.extend(std::iter::repeat_n(item.clone(), d));
    }
    Ok(out)
}

/// Row-wise version of [`expand_to_alignment`] for embedding matrices.
pub fn expand_rows(embeddings: &Tensor, durations: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..embeddings.rows()).map(|r| embeddings.row(r).to_vec()).collect();
    let expanded = expand_to_alignment(&rows, durations)?;
    let cols = embeddings.cols();
    let mut t = Tensor::zeros(&[expanded.len(), cols]);
    for (r, row) in expanded.iter().enumerate() {
        t.row_mut(r).copy_from_slice(row);
    }
    Ok(t)
}

/// One optimizer step on the batch-mean L1 loss. `trainable = None` updates
/// everything.
pub fn duration_train_step(
    model: &mut DurationModel,
    batch: &[DurationExample],
    opt: &mut Adam,
    rng: &mut SeededRng,
    partition: Option<&ParameterPartition>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let trainable: Option<&BTreeSet<String>> = partition.map(|p| &p.trainable);
    if partition.is_some() {
        model.mode = Mode::Train;
    }
    let graph = Graph::new();
    let ctx = Ctx::train(&graph, &model.store, trainable, SeededRng::new(rng.next_u64()));
    let mut total: Option<Var<'_>> = None;
    for ex in batch {
        ex.validate()?;
        let cond = (!ex.condition.is_empty()).then_some(ex.condition.as_slice());
        let pred = model.forward(&ctx, &ex.symbols, cond)?;
        let gold = Tensor::new(
            vec![ex.durations.len(), 1],
            ex.durations.iter().map(|&d| d as f64).collect(),
        )?;
        let l = pred.sub(ctx.constant(gold))?.abs()?.mean();
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(l)?,
        });
    }
    let loss = total.expect("nonempty batch").scale(1.0 / batch.len() as f64);
    let value = loss.with_value(|v| v.item());
    if !value.is_finite() {
        model.mode = Mode::Eval;
        return Err(Error::NonFinite {
            what: "duration loss at optimizer step",
            index: opt.steps_taken() as usize,
        });
    }
    let mut grads = graph.backward(loss)?;
    let grads = ctx.collect_grads(&mut grads);
    drop(ctx);
    opt.apply(&mut model.store, &grads)?;
    model.mode = Mode::Eval;
    Ok(value)
}

/// Mean absolute error of rounded predictions on `examples`.
pub fn heldout_mae(model: &DurationModel, examples: &[DurationExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let cond = (!ex.condition.is_empty()).then_some(ex.condition.as_slice());
        let graph = Graph::no_grad();
        let ctx = Ctx::eval(&graph, &model.store);
        let raw = model.forward(&ctx, &ex.symbols, cond)?;
        let raw = raw.value();
        for (p, &g) in raw.data().iter().zip(&ex.durations) {
            total += (round_duration(*p) as f64 - g as f64).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
