use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parameter-efficient mechanism accompanies the cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Sequential,
    Parallel,
    Lora,
    LoraBiasTuning,
}

/// Where LoRA attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraPlacement {
    /// Query, key and value projections of self-attention.
    SelfAttentionInputs,
    /// Every linear layer of the pre-trained model.
    AllLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64, dropout: f64) -> Result<Self> {
        let cfg = Self { rank, alpha, dropout };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("LoRA rank must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Condition-encoder size (the frozen text-encoder stand-in).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_tokens: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            dim: 32,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 64,
            max_tokens: 64,
        }
    }

    pub fn paper() -> Self {
        Self {
            dim: 512,
            n_layers: 2,
            n_heads: 8,
            ff_dim: 2048,
            max_tokens: 256,
        }
    }
}

/// Full description of what gets injected into a pre-trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub lora_placement: LoraPlacement,
    /// Hidden width of sequential/parallel adapter blocks.
    pub adapter_hidden: usize,
    pub lora: LoraConfig,
    pub cross_attn_heads: usize,
    pub cross_attn_head_dim: usize,
    pub encoder: EncoderConfig,
}

impl AdapterSpec {
    /// LoRA + bias-tuning at desk scale: r = α = 8, 4 heads × 16.
    pub fn desk() -> Self {
        Self {
            kind: AdapterKind::LoraBiasTuning,
            lora_placement: LoraPlacement::SelfAttentionInputs,
            adapter_hidden: 16,
            lora: LoraConfig {
                rank: 8,
                alpha: 8.0,
                dropout: 0.05,
            },
            cross_attn_heads: 4,
            cross_attn_head_dim: 16,
            encoder: EncoderConfig::desk(),
        }
    }

    /// r = α = 64, dropout 0.05, adapter hidden 64, 12 heads × 64.
    pub fn paper() -> Self {
        Self {
            kind: AdapterKind::LoraBiasTuning,
            lora_placement: LoraPlacement::SelfAttentionInputs,
            adapter_hidden: 64,
            lora: LoraConfig {
                rank: 64,
                alpha: 64.0,
                dropout: 0.05,
            },
            cross_attn_heads: 12,
            cross_attn_head_dim: 64,
            encoder: EncoderConfig::paper(),
        }
    }

    pub fn with_kind(mut self, kind: AdapterKind, placement: LoraPlacement) -> Self {
        self.kind = kind;
        self.lora_placement = placement;
        self
    }

    /// The five adaptive-module configurations compared side by side.
    pub fn comparison_set(base: &AdapterSpec) -> Vec<(&'static str, AdapterSpec)> {
        use AdapterKind::*;
        use LoraPlacement::*;
        vec![
            (
                "sequential_adapter",
                base.clone().with_kind(Sequential, SelfAttentionInputs),
            ),
            (
                "parallel_adapter",
                base.clone().with_kind(Parallel, SelfAttentionInputs),
            ),
            ("lora_self_attention", base.clone().with_kind(Lora, SelfAttentionInputs)),
            (
                "lora_self_attention_bias_tuning",
                base.clone().with_kind(LoraBiasTuning, SelfAttentionInputs),
            ),
            ("lora_all_linear", base.clone().with_kind(Lora, AllLinear)),
        ]
    }

    pub fn uses_lora(&self) -> bool {
        matches!(self.kind, AdapterKind::Lora | AdapterKind::LoraBiasTuning)
    }

    pub fn uses_bias_tuning(&self) -> bool {
        self.kind == AdapterKind::LoraBiasTuning
    }

    pub fn cross_attn_inner(&self) -> usize {
        self.cross_attn_heads * self.cross_attn_head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_lora() {
            self.lora.validate()?;
        }
        if self.adapter_hidden == 0 && matches!(self.kind, AdapterKind::Sequential | AdapterKind::Parallel) {
            return Err(Error::invalid("adapter_hidden must be >= 1"));
        }
        if self.cross_attn_heads == 0 || self.cross_attn_head_dim == 0 {
            return Err(Error::invalid("cross-attention needs at least one head of width >= 1"));
        }
        if self.encoder.n_heads == 0 || self.encoder.dim % self.encoder.n_heads != 0 {
            return Err(Error::invalid("encoder dim must be divisible by its head count"));
        }
        Ok(())
    }
}
