//! The pre-trained backbone: transformer layers, time embedding and the
//! frame-level input assembly.

mod backbone;
mod embedding;
mod layers;
mod params;

pub use backbone::{
    assemble_acoustic_input, concat_frame_inputs, one_hot_embed, AcousticInput, BackboneConfig, VectorFieldModel,
    POSITION_EMBEDDING, SYMBOL_EMBEDDING,
};
pub use embedding::sinusoidal_time_embedding;
pub use layers::{multi_head_attention, FeedForward, Linear, Norm, SelfAttention, TransformerLayer, TransformerStack};
pub use params::{Ctx, Init, ParamStore};
