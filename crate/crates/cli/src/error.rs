use std::process::ExitCode;

use adapterpipe::adapters::AdapterError;
use adapterpipe::cache_store::CacheError;
use adapterpipe::model_cost::SpecError;
use adapterpipe::planner::PlanError;
use adapterpipe::profile::ProfileError;
use adapterpipe::sim::SimError;
use thiserror::Error;

/// Every failure the CLI reports, each tied to one exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("no feasible plan: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Invalid(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Io(_) => 5,
        })
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Invalid(msg.into())
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        match e {
            SpecError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::NoFeasiblePlan => CliError::Infeasible(
                "every device grouping exceeds a memory budget or divides the micro-batch unevenly".into(),
            ),
            PlanError::Profile(p) => p.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Plan(p) => p.into(),
            SimError::Profile(p) => p.into(),
            SimError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Cache(c) => c.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}
