//! Experiment front end for the GA-DKL optimizer: configuration, the run and
//! policy-study commands, and CSV/JSON artifacts for plotting.

pub mod artifacts;
pub mod commands;
pub mod config;

use gadkl_core::acquisition::AcquisitionError;
use gadkl_core::dkl::DklError;
use gadkl_core::ferrosim::SimError;
use gadkl_core::genetic::GaError;
use gadkl_core::orchestrator::OrchestratorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 2 for bad configuration or input, 3 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        let msg = e.to_string();
        if e.is_numerical() {
            return CliError::Numerical(msg);
        }
        match e {
            OrchestratorError::InvalidConfig(_)
            | OrchestratorError::Lattice(SimError::InvalidConfig(_) | SimError::InvalidDisorder(_))
            | OrchestratorError::Surrogate(DklError::InvalidConfig(_))
            | OrchestratorError::Genetic(GaError::InvalidConfig(_))
            | OrchestratorError::Acquisition(AcquisitionError::ExhaustedPool { .. }) => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}
