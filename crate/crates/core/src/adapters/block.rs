use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{SeededRng, Var};
use crate::transformer::{Ctx, Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Transforms the sub-block output.
    Sequential,
    /// Reads the sub-block input, adds to its output.
    Parallel,
}

/// Two-layer ReLU bottleneck whose second layer starts at zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterBlock {
    pub mode: AdapterMode,
    pub down: Linear,
    pub up: Linear,
}

impl AdapterBlock {
    pub fn declare(
        store: &mut ParamStore,
        path: &str,
        dim: usize,
        hidden: usize,
        mode: AdapterMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let down = Linear::declare(store, &format!("{path}.down"), dim, hidden, rng)?;
        let up = Linear::declare_with(store, &format!("{path}.up"), hidden, dim, Init::Zeros, rng)?;
        Ok(Self { mode, down, up })
    }

    /// Sequential: `out + FFN(out)`. Parallel: `out + FFN(in)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, sub_block_in: Var<'g>, sub_block_out: Var<'g>) -> Result<Var<'g>> {
        let src = match self.mode {
            AdapterMode::Sequential => sub_block_out,
            AdapterMode::Parallel => sub_block_in,
        };
        let h = self.down.forward_plain(ctx, src)?.relu();
        sub_block_out.add(self.up.forward_plain(ctx, h)?)
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.down.in_dim, self.down.out_dim);
        d * h + h + h * d + d
    }
}
