use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Var};
use crate::transformer::{multi_head_attention, Ctx, Init, Linear, ParamStore};

/// Multi-head attention from frames (queries) to the encoded condition
/// (keys, values). The output projection starts at zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl CrossAttention {
    pub fn declare(
        store: &mut ParamStore,
        path: &str,
        hidden_dim: usize,
        cond_dim: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let inner = n_heads * head_dim;
        Ok(Self {
            q: Linear::declare(store, &format!("{path}.q"), hidden_dim, inner, rng)?,
            k: Linear::declare(store, &format!("{path}.k"), cond_dim, inner, rng)?,
            v: Linear::declare(store, &format!("{path}.v"), cond_dim, inner, rng)?,
            o: Linear::declare_with(store, &format!("{path}.o"), inner, hidden_dim, Init::Zeros, rng)?,
            n_heads,
            head_dim,
        })
    }

    /// `hidden + O·MHA(Q·hidden, K·cond, V·cond)`; an empty condition
    /// leaves `hidden` untouched.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, hidden: Var<'g>, cond: Var<'g>) -> Result<Var<'g>> {
        if cond.rows() == 0 {
            return Ok(hidden);
        }
        let inner = self.n_heads * self.head_dim;
        if self.q.out_dim != inner || self.k.out_dim != inner || cond.cols() != self.k.in_dim {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: vec![self.n_heads, self.head_dim],
                rhs: vec![self.q.out_dim, cond.cols()],
            });
        }
        let q = self.q.forward_plain(ctx, hidden)?;
        let k = self.k.forward_plain(ctx, cond)?;
        let v = self.v.forward_plain(ctx, cond)?;
        let att = multi_head_attention(q, k, v, self.n_heads, self.head_dim)?;
        hidden.add(self.o.forward_plain(ctx, att)?)
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }
}
