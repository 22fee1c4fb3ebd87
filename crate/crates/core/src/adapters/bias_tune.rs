//! `(Linear(x) + b) ⊙ s` with `b = 0`, `s = 1` at attachment time.

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Var};
use crate::transformer::{Ctx, Init, Linear, ParamStore};

pub fn bias_name(layer: &Linear) -> String {
    format!("{}.bt_b", layer.path)
}

pub fn scale_name(layer: &Linear) -> String {
    format!("{}.bt_s", layer.path)
}

pub fn attach(store: &mut ParamStore, layer: &mut Linear, rng: &mut SeededRng) -> Result<()> {
    if layer.bias_tune {
        return Err(Error::invalid(format!("`{}` is already bias-tuned", layer.path)));
    }
    store.declare(&bias_name(layer), &[layer.out_dim], Init::Zeros, rng)?;
    store.declare(&scale_name(layer), &[layer.out_dim], Init::Ones, rng)?;
    layer.bias_tune = true;
    Ok(())
}

/// Applies the bias/scale pair to an already computed linear output.
pub fn apply<'g>(ctx: &Ctx<'g, '_>, layer: &Linear, y: Var<'g>) -> Result<Var<'g>> {
    let b = ctx.param(&bias_name(layer))?;
    let s = ctx.param(&scale_name(layer))?;
    y.add(b)?.mul(s)
}

/// Full bias-tuned layer: `(W·x + w_b + b) ⊙ s`.
pub fn bias_tuned_linear<'g>(ctx: &Ctx<'g, '_>, layer: &Linear, x: Var<'g>) -> Result<Var<'g>> {
    let y = layer.forward_plain(ctx, x)?;
    apply(ctx, layer, y)
}
