//! Scenario harness: parses scenario files, runs clients against an
//! executor, writes CSV reports and checks the results against oracles.

use thiserror::Error;

pub mod checks;
pub mod experiments;
pub mod harness;
pub mod report;
pub mod scenario;

pub use harness::{run, JobResult, RunOptions, RunReport, VariantResult};
pub use scenario::Scenario;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad scenario file or flag; the message carries line context when
    /// the parser has it.
    #[error("{origin}: {message}")]
    Config { origin: String, message: String },
    #[error(transparent)]
    Model(#[from] splitserve_core::model::ModelError),
    #[error(transparent)]
    Client(#[from] splitserve_core::client::ClientError),
    #[error(transparent)]
    Tensor(#[from] splitserve_core::tensor::TensorError),
    #[error(transparent)]
    Sim(#[from] splitserve_core::sim::SimError),
    #[error("child process: {0}")]
    Child(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config { .. })
    }
}
