//! Closed-form parameter counts, independent of model construction.

use super::spec::{AdapterKind, AdapterSpec, LoraPlacement};
use crate::transformer::BackboneConfig;

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Every `(in, out)` linear shape of the backbone, in-stack layers first.
fn backbone_linears(c: &BackboneConfig) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let d = c.model_dim;
    let per_layer = [(d, d), (d, d), (d, d), (d, d), (d, c.ff_dim), (c.ff_dim, d)];
    let stack = (0..c.n_layers).flat_map(|_| per_layer).collect();
    let heads = vec![(c.input_dim(), d), (d, c.feature_dim)];
    (stack, heads)
}

pub fn backbone_params(c: &BackboneConfig) -> usize {
    let d = c.model_dim;
    let (stack, heads) = backbone_linears(c);
    let norms = (2 * c.n_layers + 1) * 2 * d;
    c.vocab_size * c.symbol_dim
        + c.max_seq_len * d
        + stack.iter().chain(&heads).map(|&(i, o)| linear(i, o)).sum::<usize>()
        + norms
}

/// Cross-attention in every layer plus the condition projection.
pub fn condition_pathway_params(c: &BackboneConfig, spec: &AdapterSpec) -> usize {
    let d = c.model_dim;
    let inner = spec.cross_attn_inner();
    let cross = 3 * linear(d, inner) + linear(inner, d);
    c.n_layers * cross + linear(spec.encoder.dim, d)
}

pub fn adapter_block_params(dim: usize, hidden: usize) -> usize {
    2 * dim * hidden + hidden + dim
}

/// Parameters of the spec-specific modules, excluding the condition pathway.
/// Bias-tuning counts its scale/bias vectors and the unfrozen LayerNorms.
pub fn adaptive_params(c: &BackboneConfig, spec: &AdapterSpec) -> usize {
    let d = c.model_dim;
    let (stack, heads) = backbone_linears(c);
    let r = spec.lora.rank;
    let lora = |shapes: &[(usize, usize)]| shapes.iter().map(|&(i, o)| r * (i + o)).sum::<usize>();
    match spec.kind {
        AdapterKind::Sequential | AdapterKind::Parallel => {
            2 * c.n_layers * adapter_block_params(d, spec.adapter_hidden)
        }
        AdapterKind::Lora | AdapterKind::LoraBiasTuning => {
            let lora_count = match spec.lora_placement {
                LoraPlacement::SelfAttentionInputs => c.n_layers * 3 * r * 2 * d,
                LoraPlacement::AllLinear => lora(&stack) + lora(&heads),
            };
            let bias_tuning = if spec.uses_bias_tuning() {
                let vectors: usize = stack.iter().chain(&heads).map(|&(_, o)| 2 * o).sum();
                vectors + (2 * c.n_layers + 1) * 2 * d
            } else {
                0
            };
            lora_count + bias_tuning
        }
    }
}

/// LoRA-only count for `n_layers` layers with Q/K/V of width `d`.
pub fn lora_self_attention_params(n_layers: usize, d: usize, rank: usize) -> usize {
    n_layers * 3 * 2 * d * rank
}
