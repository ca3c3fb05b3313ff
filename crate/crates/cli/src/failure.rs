//! Error categories and their process exit codes.

use std::process::ExitCode;

use anc_core::Error;

#[derive(Debug)]
pub enum Failure {
    Io(anyhow::Error),
    Validation(anyhow::Error),
    Solver(anyhow::Error),
    Instability(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Io(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Instability(_) => 4,
        })
    }

    pub fn message(&self) -> String {
        let (kind, e) = match self {
            Failure::Io(e) => ("i/o error", e),
            Failure::Validation(e) => ("invalid configuration", e),
            Failure::Solver(e) => ("solver failure", e),
            Failure::Instability(e) => ("instability", e),
        };
        format!("{kind}: {e:#}")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Wav { .. } | Error::Json { .. } | Error::Parse { .. } => {
                Failure::Io(e.into())
            }
            Error::SolverFailure(_) => Failure::Solver(e.into()),
            Error::SingularSensitivity { .. } | Error::MarginalCurve { .. } | Error::Unstable { .. } => {
                Failure::Instability(e.into())
            }
            _ => Failure::Validation(e.into()),
        }
    }
}
