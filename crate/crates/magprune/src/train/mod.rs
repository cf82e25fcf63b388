//! Training regimes: dense/sparse MLM pretraining, domain-transfer
//! pretraining, and task fine-tuning with or without pruning.

pub mod encode;
pub mod lr;
pub mod mlm;
pub mod optim;
pub mod runs;

pub use lr::{boundaries_from_epochs, LrKind, LrSchedule};
pub use mlm::{mlm_mask_batch, IGNORE_INDEX};
pub use optim::{clip_global_norm, GradMap, OptimizerState};
pub use runs::{
    eval_mlm_loss, evaluate_checkpoint, finetune_run, pretrain_run, FinetuneOutput, InitModel,
    PretrainOutput, PruneSpan, Regime, RunRecord, Split, TrainRunConfig,
};
