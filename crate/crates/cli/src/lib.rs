//! Batch driver for the salfuse saliency pipeline: dataset ingestion,
//! forest and fusion training, inference and evaluation.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use commands::{cmd_evaluate, cmd_predict, cmd_train_forest, cmd_train_fusion, predict_image};
pub use config::PipelineConfig;
pub use dataset::{ingest, DatasetManifest};
pub use error::CliError;
