//! Experiment orchestration for the uncertainty study: configuration,
//! model training and caching, the four experiments, and the CSV, PGM and
//! JSON artifacts they emit.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod report;

use thiserror::Error;

pub use config::HarnessConfig;
pub use experiments::Harness;
pub use report::{ExperimentReport, Row};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] uqsynth_core::Error),

    #[error("{experiment} [{condition}]: {source}")]
    Condition {
        experiment: String,
        condition: String,
        source: uqsynth_core::Error,
    },
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Core(e) | HarnessError::Condition { source: e, .. } => e.kind(),
        }
    }

    /// Single-line `error kind=... message="..."` rendering for stderr.
    pub fn one_line(&self) -> String {
        let message = self
            .to_string()
            .replace(['\n', '\r'], " ")
            .replace('"', "'");
        format!("error kind={} message=\"{}\"", self.kind(), message)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Core(e.into())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
