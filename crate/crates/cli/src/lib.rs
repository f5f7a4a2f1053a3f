//! Experiment runner for `eqcausal`: config loading, table ingestion,
//! command pipelines and run manifests.

pub mod bench;
pub mod config;
pub mod error;
pub mod iotable;
pub mod output;
pub mod run;

pub use config::{load_config, parse_config, Command, ExperimentConfig};
pub use error::CliError;
pub use iotable::{load_iotable_csv, write_iotable_csv};
pub use output::RunManifest;
pub use run::run_experiment;
