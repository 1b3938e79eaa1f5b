//! Library side of the `rte-sim` command: configuration, validation and
//! experiment runners. The binary only parses arguments and maps errors to
//! exit codes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

use std::path::PathBuf;

use rte_core::RteError;
use thiserror::Error;

pub use config::{validate, Experiment, Finding, RunConfig};
pub use run::{run, RunOptions, RunSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] RteError),
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for configuration and I/O problems, 2 for model errors, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Core(e) => match e.root() {
                RteError::Config(_) | RteError::Grid { .. } | RteError::Query(_) => 1,
                RteError::Model(_)
                | RteError::ModelEvaluation { .. }
                | RteError::Unsupported(_)
                | RteError::RunawayJumps { .. } => 2,
                RteError::ImplicitSolve { .. } | RteError::Domain { .. } | RteError::Fit(_) => 3,
                RteError::Replication { .. } => unreachable!("root looks through replication wrappers"),
            },
        }
    }
}
