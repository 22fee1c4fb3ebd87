use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::block::{AdapterBlock, AdapterMode};
use super::cross_attention::CrossAttention;
use super::encoder::{ConditionEncoder, Conditioning};
use super::spec::{AdapterKind, AdapterSpec, LoraPlacement};
use super::{bias_tune, lora};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::transformer::{Linear, ParamStore, TransformerLayer, TransformerStack};

/// Whether dropout-bearing paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Mutable views of everything injection touches.
pub struct AdaptableParts<'a> {
    pub store: &'a mut ParamStore,
    pub stack: &'a mut TransformerStack,
    /// Linear layers outside the transformer stack (input/output heads).
    pub extra_linears: Vec<&'a mut Linear>,
    pub conditioning: &'a mut Option<Conditioning>,
    pub model_dim: usize,
    pub mode: Mode,
}

/// A transformer model that can receive adapters and a condition pathway.
pub trait Adaptable {
    fn parts_mut(&mut self) -> AdaptableParts<'_>;
    fn store(&self) -> &ParamStore;
    fn stack(&self) -> &TransformerStack;
    fn conditioning(&self) -> Option<&Conditioning>;
}

/// Disjoint split of parameter names into frozen and trainable.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl ParameterPartition {
    /// Everything trainable; what pre-training uses.
    pub fn all_trainable(store: &ParamStore) -> Self {
        Self {
            trainable: store.names().map(str::to_string).collect(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        store.count_where(|n| self.trainable.contains(n))
    }

    pub fn frozen_count(&self, store: &ParamStore) -> usize {
        store.count_where(|n| self.frozen.contains(n))
    }

    /// Trainable parameters outside the condition pathway (cross-attention
    /// and condition projection), i.e. the spec-specific modules.
    pub fn adaptive_count(&self, store: &ParamStore) -> usize {
        store.count_where(|n| self.trainable.contains(n) && !is_condition_pathway(n))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Checks disjointness and that the two sets cover `store` exactly.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        if let Some(n) = self.trainable.intersection(&self.frozen).next() {
            return Err(Error::invalid(format!("`{n}` is both frozen and trainable")));
        }
        for n in store.names() {
            if !self.trainable.contains(n) && !self.frozen.contains(n) {
                return Err(Error::invalid(format!("`{n}` missing from the partition")));
            }
        }
        let total = self.trainable.len() + self.frozen.len();
        if total != store.len() {
            return Err(Error::invalid("partition names parameters absent from the model"));
        }
        Ok(())
    }

    /// Drops names no longer present, e.g. after a LoRA merge.
    pub fn retain_existing(&mut self, store: &ParamStore) {
        self.trainable.retain(|n| store.contains(n));
        self.frozen.retain(|n| store.contains(n));
    }
}

fn layer_path(layer: &TransformerLayer) -> String {
    layer.ln1.path.trim_end_matches(".ln1").to_string()
}

fn is_condition_pathway(name: &str) -> bool {
    name.starts_with("cond_proj.") || name.contains(".cross.")
}

pub const CONDITION_PROJECTION: &str = "cond_proj";

/// Injects the condition pathway, cross-attention in every layer and the
/// spec's adaptive modules. All new output-side weights start at zero, so
/// the model's outputs are unchanged until the first update.
///
/// `encoder_store` holds the fitted encoder parameters; they join the model
/// store frozen.
pub fn inject_adapters<M: Adaptable>(
    model: &mut M,
    spec: &AdapterSpec,
    encoder: ConditionEncoder,
    encoder_store: ParamStore,
    seed: u64,
) -> Result<ParameterPartition> {
    spec.validate()?;
    let mut rng = SeededRng::derived(seed, 0xada7);
    let parts = model.parts_mut();
    if parts.conditioning.is_some() || parts.stack.has_cross_attention() {
        return Err(Error::AlreadyInjected);
    }
    let store = parts.store;
    let before: BTreeSet<String> = store.names().map(str::to_string).collect();
    store.absorb(encoder_store)?;
    let encoder_names: BTreeSet<String> = store
        .names()
        .filter(|n| !before.contains(*n))
        .map(str::to_string)
        .collect();

    let d = parts.model_dim;
    let proj = Linear::declare(store, CONDITION_PROJECTION, encoder.config.dim, d, &mut rng)?;
    for layer in parts.stack.layers.iter_mut() {
        let base = layer_path(layer);
        layer.cross = Some(CrossAttention::declare(
            store,
            &format!("{base}.cross"),
            d,
            d,
            spec.cross_attn_heads,
            spec.cross_attn_head_dim,
            &mut rng,
        )?);
    }

    match spec.kind {
        AdapterKind::Sequential | AdapterKind::Parallel => {
            let mode = if spec.kind == AdapterKind::Sequential {
                AdapterMode::Sequential
            } else {
                AdapterMode::Parallel
            };
            for layer in parts.stack.layers.iter_mut() {
                let base = layer_path(layer);
                layer.attn_adapter = Some(AdapterBlock::declare(
                    store,
                    &format!("{base}.attn_adapter"),
                    d,
                    spec.adapter_hidden,
                    mode,
                    &mut rng,
                )?);
                layer.ff_adapter = Some(AdapterBlock::declare(
                    store,
                    &format!("{base}.ff_adapter"),
                    d,
                    spec.adapter_hidden,
                    mode,
                    &mut rng,
                )?);
            }
        }
        AdapterKind::Lora | AdapterKind::LoraBiasTuning => {
            let mut extra = parts.extra_linears;
            for layer in parts.stack.layers.iter_mut() {
                let [q, k, v, o, up, down] = layer.base_linears_mut();
                let mut targets = vec![q, k, v];
                if spec.lora_placement == LoraPlacement::AllLinear {
                    targets.extend([o, up, down]);
                }
                for lin in targets {
                    lora::attach(store, lin, spec.lora, &mut rng)?;
                }
            }
            if spec.lora_placement == LoraPlacement::AllLinear {
                for lin in extra.iter_mut() {
                    lora::attach(store, lin, spec.lora, &mut rng)?;
                }
            }
            if spec.uses_bias_tuning() {
                for layer in parts.stack.layers.iter_mut() {
                    for lin in layer.base_linears_mut() {
                        bias_tune::attach(store, lin, &mut rng)?;
                    }
                }
                for lin in extra.iter_mut() {
                    bias_tune::attach(store, lin, &mut rng)?;
                }
            }
        }
    }

    let norm_names: BTreeSet<String> = if spec.uses_bias_tuning() {
        parts.stack.norms().iter().flat_map(|n| n.param_names()).collect()
    } else {
        BTreeSet::new()
    };
    let mut partition = ParameterPartition::default();
    for name in store.names() {
        let new = !before.contains(name) && !encoder_names.contains(name);
        if new || norm_names.contains(name) {
            partition.trainable.insert(name.to_string());
        } else {
            partition.frozen.insert(name.to_string());
        }
    }
    *parts.conditioning = Some(Conditioning {
        spec: spec.clone(),
        encoder,
        proj,
    });
    partition.validate(store)?;
    Ok(partition)
}

/// Folds every LoRA attachment into its base weight. Returns the number of
/// merged layers.
pub fn merge_lora<M: Adaptable>(model: &mut M) -> Result<usize> {
    let parts = model.parts_mut();
    if parts.mode == Mode::Train {
        return Err(Error::TrainingMode("merge_lora requires evaluation mode"));
    }
    let mut merged = 0;
    let store = parts.store;
    for layer in parts.stack.layers.iter_mut() {
        for lin in layer.base_linears_mut() {
            merged += lora::merge_into(store, lin)? as usize;
        }
    }
    for lin in parts.extra_linears {
        merged += lora::merge_into(store, lin)? as usize;
    }
    if merged == 0 {
        return Err(Error::NothingToMerge);
    }
    Ok(merged)
}
