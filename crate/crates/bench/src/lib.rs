//! Desk-scale benchmark harness: synthetic shifted data, pretraining,
//! fine-tuning with every supported method, ID/OOD evaluation, metrics and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod runner;
pub mod sweep;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Method, Schedule};
pub use dataset::{generate_shift_dataset, DatasetSpec, ShiftDataset, ShiftKind, Split};
pub use error::{Error, Result};
pub use evaluate::{accuracy, evaluate};
pub use metrics::{AccuracyTable, IterRow, RunRecord, Summary};
pub use runner::{
    finetune_in_memory, pretrain, run_experiment, FineTuner, PassCounter, Pretrained, RunOutput,
};
