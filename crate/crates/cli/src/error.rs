use std::path::{Path, PathBuf};

use gasflow_core::forecast::ForecastError;
use gasflow_core::lp::LpError;
use gasflow_core::milp::MilpError;
use gasflow_core::network::ModelError;
use gasflow_core::tsro::TsroError;
use gasflow_core::uncertainty::UncertaintyError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER_LIMIT: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, inputs that fail their schema, or an infeasible model.
    #[error("{0}")]
    Validation(String),
    /// Iteration, node or numerical limits in a solver.
    #[error("solver limit: {0}")]
    SolverLimit(String),
    #[error("{}: {message}", .path.display())]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::SolverLimit(_) => EXIT_SOLVER_LIMIT,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

fn lp_is_limit(e: &LpError) -> bool {
    matches!(e, LpError::IterationLimit(_) | LpError::Numerical(_))
}

fn milp_is_limit(e: &MilpError) -> bool {
    match e {
        MilpError::NodeLimit { .. } | MilpError::NoIncumbent { .. } => true,
        MilpError::Lp(lp) => lp_is_limit(lp),
        _ => false,
    }
}

impl From<TsroError> for CliError {
    fn from(e: TsroError) -> Self {
        let limit = match &e {
            TsroError::Lp(lp) => lp_is_limit(lp),
            TsroError::Milp(m) => milp_is_limit(m),
            TsroError::DualityAudit { .. } => true,
            _ => false,
        };
        if limit {
            CliError::SolverLimit(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<MilpError> for CliError {
    fn from(e: MilpError) -> Self {
        if milp_is_limit(&e) {
            CliError::SolverLimit(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<UncertaintyError> for CliError {
    fn from(e: UncertaintyError) -> Self {
        CliError::Validation(e.to_string())
    }
}
