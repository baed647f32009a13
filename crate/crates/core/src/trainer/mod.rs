//! Optimization and experiment orchestration: AdamW, patient-stratified
//! cross-validation, checkpointing on validation C-index, synthetic cohorts
//! with known oracles, and interpretability exports.

pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod folds;
pub mod synth;
pub mod train;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadedCheckpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::TrainConfig;
pub use export::{export_interpretability, ExportReport};
pub use folds::{assert_no_leakage, make_folds, FoldSplit};
pub use synth::{synth_cohort, SynthCohort, SynthConfig, SynthKind};
pub use train::{
    cohort_samples, cross_validate, evaluate, load_cohort, train_fold, write_epoch_log,
    CrossValidation, EpochRecord, Evaluation, FoldOutcome, FoldRun, TrainSample,
};
