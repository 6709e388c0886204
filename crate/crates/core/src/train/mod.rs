//! Two-cycle adversarial training, its ablations and the baselines.

mod bundle;
mod config;
mod log;
mod trainer;

pub use bundle::{file_hash, load_checkpoint, save_checkpoint, ModelBundle, Optimizers, NET_NAMES};
pub use config::{Ablation, Baseline, OptimizerConfig, Setting, TrainConfig, UpdateScheme};
pub use log::LossLog;
pub use trainer::{
    fit_mask_in_region, resume_state, train, Counters, TrainData, TrainOptions, TrainOutput, BRAIN_THRESHOLD,
    DIAGNOSTIC_CHECKPOINT, EPOCH_CHECKPOINT,
};
