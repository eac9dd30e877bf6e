//! Config-driven experiment runs: collect, train SRL, train policies,
//! measure GTC, sweep and summarize. Every output lands in a run directory
//! together with a manifest of content hashes.

mod commands;
mod config;
mod manifest;
mod report;
mod sweep;

use std::path::PathBuf;

pub use commands::{
    cmd_collect, cmd_gtc, cmd_train_rl, cmd_train_srl, gtc_of, load_srl, run_experiment, GtcFile,
    GtcSplit, RunOutcome, CONFIG_FILE, CURVE_FILE, DATASET_FILE, GTC_FILE, POLICY_CHECKPOINT,
    SRL_CHECKPOINT, SRL_REPORT,
};
pub use config::{DataConfig, ExperimentConfig, RlConfig, SrlConfig, CONFIG_VERSION};
pub use manifest::{content_hash, RunManifest, RunStatus, MANIFEST_FILE, VOLATILE_KEYS};
pub use report::{
    build_report, cmd_report, discover_runs, BudgetCell, Report, ReportRow, SUMMARY_CSV,
    SUMMARY_JSON,
};
pub use sweep::{
    cmd_sweep, merge_patch, AxisValue, SweepAxis, SweepOutcome, SweepRun, SweepSpec, SWEEP_CSV,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config error at `{path}`: {message}")]
    ConfigKey { path: String, message: String },
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("{failed} of {total} sweep runs failed")]
    SweepFailed { failed: usize, total: usize },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Srl(#[from] crate::srl::SrlError),
    #[error(transparent)]
    Rl(#[from] crate::rl::RlError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::ConfigKey { .. } => 1,
            _ => 2,
        }
    }
}
