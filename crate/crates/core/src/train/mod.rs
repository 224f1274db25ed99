//! Toy-scale training: AdamW, warmup + cosine schedule, synthetic data, and
//! deterministic run records.

mod config;
mod data;
mod optim;
mod record;
mod trainer;

pub use config::{config_hash, AdamWConfig, LrSchedule, TrainConfig};
pub use data::{
    gaussian_blobs, procedural_grammar, BlobDataset, BlobSpec, DatasetSpec, GrammarSpec, TokenStream,
};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWState};
pub use record::{EpochLog, LayerRouting, RunRecord, RunSummary, StepLog, RUN_LOG_FILE, SUMMARY_FILE};
pub use trainer::{
    classifier_accuracy, effective_aux_weight, lm_loss, train, train_classifier, train_lm, LmLoss,
};
