//! Condition pathway and parameter-efficient fine-tuning modules.

pub mod bias_tune;
mod block;
pub mod budget;
mod cross_attention;
mod encoder;
mod inject;
pub mod lora;
mod spec;

pub use block::{AdapterBlock, AdapterMode};
pub use cross_attention::CrossAttention;
pub use encoder::{ConditionEncoder, Conditioning, Vocab, BURST_TOKEN, EMPHASIS_MARK, MASK_TOKEN, PAUSE_TOKEN};
pub use inject::{
    inject_adapters, merge_lora, Adaptable, AdaptableParts, Mode, ParameterPartition, CONDITION_PROJECTION,
};
pub use spec::{AdapterKind, AdapterSpec, EncoderConfig, LoraConfig, LoraPlacement};
