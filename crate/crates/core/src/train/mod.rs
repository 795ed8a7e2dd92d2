//! Contrastive edge pre-training and frozen-backbone fine-tuning.

mod finetune;
mod pretrain;
mod sampling;

pub use finetune::{
    classification_loss, classification_loss_var, finetune, head_logits, predict, FinetuneConfig, FinetuneReport, GridPoint,
};
pub use pretrain::{
    pair_logits, pretrain, pretrain_loss, pretrain_loss_from_logits, pretrain_loss_var, similarity, EpochRecord,
    PretrainConfig, PretrainReport,
};
pub use sampling::{
    hold_out, resample_negatives, sample_edges, EdgeSampleSet, Pair, TypeSamples,
};
pub(crate) use sampling::NegativeSampler;

/// Similarities are clamped into `[SIM_EPS, 1 - SIM_EPS]` before the log.
pub const SIM_EPS: f64 = 1e-12;
