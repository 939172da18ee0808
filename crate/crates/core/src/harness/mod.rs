//! Monte Carlo experiment runner: configuration ingestion, paired-seed trial
//! execution, learning-curve aggregation, steady-state estimation,
//! moving-target scenarios, and CSV/JSON artifact output.
//!
//! The contract that makes comparisons meaningful is paired seeding: within
//! one trial every strategy re-derives the same per-(trial, node) data
//! streams, so any difference between curves is the strategy itself, never
//! the data. Aggregation is an ordered reduction over trial indices, which
//! keeps artifacts byte-identical across reruns and worker counts.

use thiserror::Error;

pub mod config;
pub mod output;
pub mod runner;

pub use config::{
    spike, Experiment, ExperimentConfig, ModelKind, NamedStrategy, ReferenceKind,
    TargetTrajectory,
};
pub use output::{to_db, DB_FLOOR};
pub use runner::{
    biased_reference_msd, reference_vector, run_experiment, sweep, theory_overlay,
    tracking_experiment, BiasDecomposition, BiasReport, DivergenceCount, ExperimentResult,
    LearningCurve, Metadata, NodePath, SteadyStateEstimate, SweepFailure, SweepParam,
    SweepResult, SweepRow, TheoryOverlayRow, TrackingResult,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read config {path}: {source}")]
    ReadConfig {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Cost(#[from] crate::costs::CostError),
    #[error("strategy {strategy}: all {trials} trials diverged")]
    AllTrialsDiverged { strategy: String, trials: usize },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}

impl HarnessError {
    fn invalid(msg: impl Into<String>) -> HarnessError {
        HarnessError::Invalid(msg.into())
    }

    /// True for errors in the configuration itself, as opposed to runtime
    /// failures of a valid configuration.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, HarnessError::AllTrialsDiverged { .. })
    }
}
