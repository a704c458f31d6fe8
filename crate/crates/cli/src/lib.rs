//! Command-line runner: prepares imbalanced datasets, trains the latent
//! mixture model, balances with it or with a baseline sampler, and
//! evaluates final classifiers. Every command works inside one run
//! directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod run_dir;

pub use commands::{
    cmd_balance, cmd_compare, cmd_evaluate, cmd_export_features, cmd_generate, cmd_prepare, cmd_train, Method,
    ReportRow, TrainingSet,
};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use run_dir::{Manifest, RunDir, Split};
