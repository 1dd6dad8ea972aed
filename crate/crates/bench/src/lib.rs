//! Harness around `mka-core`: seeded workloads, property suites, scaling
//! benchmarks and their CSV/Markdown/JSON reports.

pub mod alloc;
pub mod bench;
pub mod config;
pub mod oracle;
pub mod report;
pub mod verify;
pub mod workload;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mka_core::MkaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
