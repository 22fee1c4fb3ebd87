//! Conditional flow-matching objective: path, target, masking and the
//! training steps built on them.

mod mask;
mod path;
mod training;

pub use mask::{apply_mask, masked_with_indicator, MaskMode, MaskSpec};
pub use path::{conditional_path, target_field, PathParams};
pub use training::{
    cfm_loss, cfm_loss_value, finetune_step, pretrain_step, LossMaskPolicy, TelemetryLog, TelemetryRecord,
    TrainingExample,
};

#[cfg(test)]
mod tests;
