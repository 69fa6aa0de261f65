//! End-to-end experiment pipeline: data, training, checkpoints and reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod model;
pub mod report;

pub use checkpoint::{read_manifest, Checkpoint, Manifest};
pub use config::{ExperimentConfig, Strategy, FRACTIONS};
pub use data::{domain_clip, source_pool, target_pool, validation_pool, EncodedWindows};
pub use model::{train_flow, train_vae, Forecast, LoraSpec, Phase, TrainLog, WorldModel};
pub use report::{Report, Row};
pub use commands::{
    cmd_align_vae, cmd_evaluate, cmd_finetune, cmd_nll, cmd_pretrain, cmd_sample, cmd_transfer_study, Forecaster,
    ModelForecaster, OracleForecaster, StudyCell, StudyResult,
};
