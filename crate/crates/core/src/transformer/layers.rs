use serde::{Deserialize, Serialize};

use super::params::{Ctx, Init, ParamStore};
use crate::adapters::{bias_tune, lora, AdapterBlock, CrossAttention, LoraConfig};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Var};

/// Affine layer `y = x·Wᵀ + b` with `W: (out, in)`, plus optional LoRA and
/// bias-tuning attachments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Linear {
    pub path: String,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub bias_tune: bool,
}

impl Linear {
    pub fn declare(
        store: &mut ParamStore,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self::declare_with(store, path, in_dim, out_dim, Init::Uniform(bound), rng)
    }

    pub fn declare_with(
        store: &mut ParamStore,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        store.declare(&format!("{path}.w"), &[out_dim, in_dim], weight_init, rng)?;
        store.declare(&format!("{path}.b"), &[out_dim], Init::Zeros, rng)?;
        Ok(Self {
            path: path.to_string(),
            in_dim,
            out_dim,
            lora: None,
            bias_tune: false,
        })
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.path)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.path)
    }

    /// `x·Wᵀ + b` only, ignoring attachments.
    pub fn forward_plain<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let w = ctx.param(&self.weight())?;
        let b = ctx.param(&self.bias())?;
        x.matmul_t(w)?.add(b)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let mut y = self.forward_plain(ctx, x)?;
        if let Some(cfg) = &self.lora {
            y = y.add(lora::delta(ctx, self, cfg, x)?)?;
        }
        if self.bias_tune {
            y = bias_tune::apply(ctx, self, y)?;
        }
        Ok(y)
    }
}

/// LayerNorm with learned gain and bias.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Norm {
    pub path: String,
    pub dim: usize,
}

impl Norm {
    pub fn declare(store: &mut ParamStore, path: &str, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        store.declare(&format!("{path}.g"), &[dim], Init::Ones, rng)?;
        store.declare(&format!("{path}.b"), &[dim], Init::Zeros, rng)?;
        Ok(Self {
            path: path.to_string(),
            dim,
        })
    }

    pub fn param_names(&self) -> [String; 2] {
        [format!("{}.g", self.path), format!("{}.b", self.path)]
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let [g, b] = self.param_names();
        x.layer_norm().mul(ctx.param(&g)?)?.add(ctx.param(&b)?)
    }
}

/// Scaled dot-product attention over `n_heads` column blocks of width
/// `head_dim`; queries and keys/values may have different row counts.
pub fn multi_head_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    n_heads: usize,
    head_dim: usize,
) -> Result<Var<'g>> {
    let graph = q.graph();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (s, e) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(s, e)?;
        let kh = k.slice_cols(s, e)?;
        let vh = v.slice_cols(s, e)?;
        let att = qh.matmul_t(kh)?.scale(scale).softmax();
        heads.push(att.matmul(vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        graph.concat_cols(&heads)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    pub fn declare(
        store: &mut ParamStore,
        path: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {dim} not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            q: Linear::declare(store, &format!("{path}.q"), dim, dim, rng)?,
            k: Linear::declare(store, &format!("{path}.k"), dim, dim, rng)?,
            v: Linear::declare(store, &format!("{path}.v"), dim, dim, rng)?,
            o: Linear::declare(store, &format!("{path}.o"), dim, dim, rng)?,
            n_heads,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let head_dim = self.q.out_dim / self.n_heads;
        let att = multi_head_attention(q, k, v, self.n_heads, head_dim)?;
        self.o.forward(ctx, att)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn declare(store: &mut ParamStore, path: &str, dim: usize, ff_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            up: Linear::declare(store, &format!("{path}.up"), dim, ff_dim, rng)?,
            down: Linear::declare(store, &format!("{path}.down"), ff_dim, dim, rng)?,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.up.forward(ctx, x)?.relu();
        self.down.forward(ctx, h)
    }
}

/// Pre-LayerNorm block: self-attention, optional cross-attention, feed-forward,
/// each with a residual connection.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformerLayer {
    pub ln1: Norm,
    pub attn: SelfAttention,
    pub ln2: Norm,
    pub ff: FeedForward,
    #[serde(default)]
    pub cross: Option<CrossAttention>,
    #[serde(default)]
    pub attn_adapter: Option<AdapterBlock>,
    #[serde(default)]
    pub ff_adapter: Option<AdapterBlock>,
}

impl TransformerLayer {
    pub fn declare(
        store: &mut ParamStore,
        path: &str,
        dim: usize,
        ff_dim: usize,
        n_heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: Norm::declare(store, &format!("{path}.ln1"), dim, rng)?,
            attn: SelfAttention::declare(store, &format!("{path}.attn"), dim, n_heads, rng)?,
            ln2: Norm::declare(store, &format!("{path}.ln2"), dim, rng)?,
            ff: FeedForward::declare(store, &format!("{path}.ff"), dim, ff_dim, rng)?,
            cross: None,
            attn_adapter: None,
            ff_adapter: None,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>, cond: Option<Var<'g>>) -> Result<Var<'g>> {
        let a = self.attn.forward(ctx, self.ln1.forward(ctx, x)?)?;
        let mut h = x.add(a)?;
        if let Some(ad) = &self.attn_adapter {
            h = ad.forward(ctx, x, h)?;
        }
        if let (Some(cross), Some(c)) = (&self.cross, cond) {
            h = cross.forward(ctx, h, c)?;
        }
        let f = self.ff.forward(ctx, self.ln2.forward(ctx, h)?)?;
        let mut out = h.add(f)?;
        if let Some(ad) = &self.ff_adapter {
            out = ad.forward(ctx, h, out)?;
        }
        Ok(out)
    }

    /// Every linear layer that belongs to the pre-trained block.
    pub fn base_linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.attn.q,
            &mut self.attn.k,
            &mut self.attn.v,
            &mut self.attn.o,
            &mut self.ff.up,
            &mut self.ff.down,
        ]
    }

    pub fn base_linears(&self) -> [&Linear; 6] {
        [
            &self.attn.q,
            &self.attn.k,
            &self.attn.v,
            &self.attn.o,
            &self.ff.up,
            &self.ff.down,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Norm,
}

impl TransformerStack {
    pub fn declare(
        store: &mut ParamStore,
        prefix: &str,
        n_layers: usize,
        dim: usize,
        ff_dim: usize,
        n_heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::declare(store, &format!("{prefix}layers.{i}"), dim, ff_dim, n_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_norm: Norm::declare(store, &format!("{prefix}final_ln"), dim, rng)?,
        })
    }

    pub fn has_cross_attention(&self) -> bool {
        self.layers.iter().any(|l| l.cross.is_some())
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, mut x: Var<'g>, cond: Option<Var<'g>>) -> Result<Var<'g>> {
        if cond.is_some() && !self.has_cross_attention() {
            return Err(Error::NoAdapters(
                "condition context supplied to a backbone without cross-attention".into(),
            ));
        }
        for layer in &self.layers {
            x = layer.forward(ctx, x, cond)?;
        }
        self.final_norm.forward(ctx, x)
    }

    pub fn norms(&self) -> Vec<&Norm> {
        let mut out: Vec<&Norm> = self.layers.iter().flat_map(|l| [&l.ln1, &l.ln2]).collect();
        out.push(&self.final_norm);
        out
    }
}
