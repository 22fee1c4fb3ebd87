use serde::{Deserialize, Serialize};

use super::embedding::sinusoidal_time_embedding;
use super::layers::{Linear, TransformerStack};
use super::params::{Ctx, Init, ParamStore};
use crate::adapters::{Adaptable, AdaptableParts, Conditioning, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Graph, SeededRng, Tensor, Var};

/// Acoustic backbone hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    /// Width of one feature frame.
    pub feature_dim: usize,
    pub max_seq_len: usize,
    /// Number of distinct input symbols.
    pub vocab_size: usize,
    pub symbol_dim: usize,
    pub time_dim: usize,
}

impl BackboneConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            model_dim: 64,
            ff_dim: 256,
            n_heads: 4,
            feature_dim: 8,
            max_seq_len: 96,
            vocab_size: 16,
            symbol_dim: 32,
            time_dim: 32,
        }
    }

    /// 12 layers, width 768, feed-forward 3072, 12 heads, 80-dim frames.
    pub fn paper() -> Self {
        Self {
            n_layers: 12,
            model_dim: 768,
            ff_dim: 3072,
            n_heads: 12,
            feature_dim: 80,
            max_seq_len: 2048,
            vocab_size: 80,
            symbol_dim: 256,
            time_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim {} must be even", self.time_dim)));
        }
        if self.n_layers == 0 || self.feature_dim == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        Ok(())
    }

    /// Width of the per-frame concatenation `[t_emb ‖ z_p ‖ masked_x ‖ ψ_t]`;
    /// `masked_x` carries one extra mask-indicator channel.
    pub fn input_dim(&self) -> usize {
        self.time_dim + self.symbol_dim + (self.feature_dim + 1) + self.feature_dim
    }
}

/// One frame-level input to the vector field.
#[derive(Debug, Clone, Copy)]
pub struct AcousticInput<'a> {
    pub t: f64,
    /// Frame-aligned symbol ids (`z_p` before embedding).
    pub symbols: &'a [usize],
    /// `m(x₁)` with indicator channel, `(frames, feature_dim + 1)`.
    pub masked: &'a Tensor,
    /// Current flow state `ψ_t`, `(frames, feature_dim)`.
    pub state: &'a Tensor,
}

/// Transformer that predicts the flow velocity at each frame.
#[derive(Debug, Clone)]
pub struct VectorFieldModel {
    pub config: BackboneConfig,
    pub store: ParamStore,
    pub in_proj: Linear,
    pub stack: TransformerStack,
    pub out_proj: Linear,
    pub conditioning: Option<Conditioning>,
    pub mode: Mode,
}

pub const SYMBOL_EMBEDDING: &str = "sym_emb";
pub const POSITION_EMBEDDING: &str = "pos_emb";

impl VectorFieldModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        Self::build(config, ParamStore::new(), seed)
    }

    /// Structure and parameter shapes only, no allocation.
    pub fn shapes_only(config: BackboneConfig) -> Result<Self> {
        Self::build(config, ParamStore::shapes_only(), 0)
    }

    fn build(config: BackboneConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let c = &config;
        store.declare(
            SYMBOL_EMBEDDING,
            &[c.vocab_size, c.symbol_dim],
            Init::Normal(1.0),
            &mut rng,
        )?;
        let in_proj = Linear::declare(&mut store, "in_proj", c.input_dim(), c.model_dim, &mut rng)?;
        store.declare(
            POSITION_EMBEDDING,
            &[c.max_seq_len, c.model_dim],
            Init::Normal(0.1),
            &mut rng,
        )?;
        let stack = TransformerStack::declare(&mut store, "", c.n_layers, c.model_dim, c.ff_dim, c.n_heads, &mut rng)?;
        let out_bound = 0.1 / (c.model_dim as f64).sqrt();
        let out_proj = Linear::declare_with(
            &mut store,
            "out_proj",
            c.model_dim,
            c.feature_dim,
            Init::Uniform(out_bound),
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            in_proj,
            stack,
            out_proj,
            conditioning: None,
            mode: Mode::Eval,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.total()
    }

    pub fn is_conditioned(&self) -> bool {
        self.conditioning.is_some()
    }

    /// Embeds frame-aligned symbols: `one_hot(symbols) · E`.
    pub fn embed_symbols<'g>(&self, ctx: &Ctx<'g, '_>, symbols: &[usize]) -> Result<Var<'g>> {
        one_hot_embed(ctx, SYMBOL_EMBEDDING, self.config.vocab_size, symbols)
    }

    /// Predicted velocity, `(frames, feature_dim)`.
    ///
    /// `condition` is the tokenized `z_f`; it is only accepted once
    /// cross-attention has been injected.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        input: &AcousticInput<'_>,
        condition: Option<&[usize]>,
    ) -> Result<Var<'g>> {
        let cond = match condition {
            None => None,
            Some(tokens) => Some(self.condition_context(ctx, tokens)?),
        };
        self.forward_with_context(ctx, input, cond)
    }

    /// Projected condition sequence for `tokens`.
    pub fn condition_context<'g>(&self, ctx: &Ctx<'g, '_>, tokens: &[usize]) -> Result<Var<'g>> {
        let c = self.conditioning.as_ref().ok_or_else(|| {
            Error::NoAdapters("condition context supplied to a backbone without cross-attention".into())
        })?;
        c.context(ctx, tokens)
    }

    /// Forward pass with an already projected condition sequence.
    pub fn forward_with_context<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        input: &AcousticInput<'_>,
        cond: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let frames = input.symbols.len();
        if frames > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {frames} frames exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let z_p = self.embed_symbols(ctx, input.symbols)?;
        let t_emb = sinusoidal_time_embedding(input.t, self.config.time_dim)?;
        let x = assemble_acoustic_input(ctx, &self.in_proj, &t_emb, z_p, input.masked, input.state)?;
        let pos = ctx.param(POSITION_EMBEDDING)?.slice_rows(0, frames)?;
        let h = self.stack.forward(ctx, x.add(pos)?, cond)?;
        self.out_proj.forward(ctx, h)
    }

    /// Evaluation-mode forward on a fresh gradient-free tape.
    pub fn predict(&self, input: &AcousticInput<'_>, condition: Option<&[usize]>) -> Result<Tensor> {
        let graph = Graph::no_grad();
        let ctx = Ctx::eval(&graph, &self.store);
        let out = self.forward(&ctx, input, condition)?;
        Ok((*out.value()).clone())
    }
}

impl Adaptable for VectorFieldModel {
    fn parts_mut(&mut self) -> AdaptableParts<'_> {
        AdaptableParts {
            store: &mut self.store,
            stack: &mut self.stack,
            extra_linears: vec![&mut self.in_proj, &mut self.out_proj],
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

/// Rows of the embedding table `name` selected by `ids`, as a one-hot product.
pub fn one_hot_embed<'g>(ctx: &Ctx<'g, '_>, name: &str, vocab: usize, ids: &[usize]) -> Result<Var<'g>> {
    let mut oh = Tensor::zeros(&[ids.len(), vocab]);
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::invalid(format!("symbol id {id} outside vocabulary of {vocab}")));
        }
        oh.set(r, id, 1.0);
    }
    ctx.constant(oh).matmul(ctx.param(name)?)
}

/// Per-frame concatenation `[t_emb ‖ z_p ‖ masked_x ‖ ψ_t]` followed by the
/// learned input projection.
pub fn assemble_acoustic_input<'g>(
    ctx: &Ctx<'g, '_>,
    in_proj: &Linear,
    t_emb: &[f64],
    z_p: Var<'g>,
    masked_x: &Tensor,
    psi_t: &Tensor,
) -> Result<Var<'g>> {
    let frames = z_p.rows();
    if masked_x.rows() != frames || psi_t.rows() != frames {
        return Err(Error::ShapeMismatch {
            op: "assemble_acoustic_input",
            lhs: vec![frames, masked_x.rows()],
            rhs: vec![psi_t.rows()],
        });
    }
    let concat = concat_frame_inputs(ctx, t_emb, z_p, masked_x, psi_t)?;
    in_proj.forward(ctx, concat)
}

/// The raw concatenation, before projection.
pub fn concat_frame_inputs<'g>(
    ctx: &Ctx<'g, '_>,
    t_emb: &[f64],
    z_p: Var<'g>,
    masked_x: &Tensor,
    psi_t: &Tensor,
) -> Result<Var<'g>> {
    let frames = z_p.rows();
    let mut t_rows = Vec::with_capacity(frames * t_emb.len());
    for _ in 0..frames {
        t_rows.extend_from_slice(t_emb);
    }
    let t = ctx.constant(Tensor::new(vec![frames, t_emb.len()], t_rows)?);
    let m = ctx.constant(masked_x.clone().reshape(vec![frames, masked_x.cols()])?);
    let s = ctx.constant(psi_t.clone().reshape(vec![frames, psi_t.cols()])?);
    ctx.graph.concat_cols(&[t, z_p, m, s])
}
