//! Low-rank additive updates on frozen linear layers.

use super::spec::LoraConfig;
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor, Var};
use crate::transformer::{Ctx, Init, Linear, ParamStore};

pub fn down_name(layer: &Linear) -> String {
    format!("{}.lora_a", layer.path)
}

pub fn up_name(layer: &Linear) -> String {
    format!("{}.lora_b", layer.path)
}

/// Declares `A: (r, in)` (random) and `B: (out, r)` (zeros) and marks the
/// layer as carrying LoRA.
pub fn attach(store: &mut ParamStore, layer: &mut Linear, cfg: LoraConfig, rng: &mut SeededRng) -> Result<()> {
    cfg.validate()?;
    if layer.lora.is_some() {
        return Err(Error::invalid(format!("`{}` already has LoRA", layer.path)));
    }
    let bound = 1.0 / (layer.in_dim as f64).sqrt();
    store.declare(&down_name(layer), &[cfg.rank, layer.in_dim], Init::Uniform(bound), rng)?;
    store.declare(&up_name(layer), &[layer.out_dim, cfg.rank], Init::Zeros, rng)?;
    layer.lora = Some(cfg);
    Ok(())
}

/// `(α/r)·B·A·dropout(x)`, row-wise. Dropout only in training mode.
pub fn delta<'g>(ctx: &Ctx<'g, '_>, layer: &Linear, cfg: &LoraConfig, x: Var<'g>) -> Result<Var<'g>> {
    cfg.validate()?;
    let a = ctx.param(&down_name(layer))?;
    let b = ctx.param(&up_name(layer))?;
    let x = if ctx.train && cfg.dropout > 0.0 {
        let keep = 1.0 - cfg.dropout;
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = ctx.with_rng(|r| {
            (0..n)
                .map(|_| if r.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect()
        });
        x.mul(ctx.constant(Tensor::new(shape, mask)?))?
    } else {
        x
    };
    Ok(x.matmul_t(a)?.matmul_t(b)?.scale(cfg.scale()))
}

/// `W·x + b + (α/r)·B·A·dropout(x)` for a layer that carries LoRA.
pub fn lora_linear_forward<'g>(ctx: &Ctx<'g, '_>, layer: &Linear, x: Var<'g>) -> Result<Var<'g>> {
    let cfg = layer
        .lora
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("`{}` has no LoRA attachment", layer.path)))?;
    let y = layer.forward_plain(ctx, x)?;
    y.add(delta(ctx, layer, cfg, x)?)
}

/// Folds `(α/r)·B·A` into `W` and removes the attachment.
pub fn merge_into(store: &mut ParamStore, layer: &mut Linear) -> Result<bool> {
    let Some(cfg) = layer.lora.take() else { return Ok(false) };
    let a = store
        .remove(&down_name(layer))
        .ok_or_else(|| Error::invalid("missing lora_a"))?;
    let b = store
        .remove(&up_name(layer))
        .ok_or_else(|| Error::invalid("missing lora_b"))?;
    let delta = b.matmul(&a)?.scale(cfg.scale());
    let w = store.get_mut(&layer.weight())?;
    w.add_scaled(&delta, 1.0);
    Ok(true)
}
