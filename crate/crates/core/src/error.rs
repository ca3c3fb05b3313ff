use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("wav error on {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty data: {0}")]
    Empty(&'static str),

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: u32, right: u32 },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("loudspeaker path {path} channel {channel} has a non-zero first tap")]
    NonCausalPath { path: &'static str, channel: usize },

    #[error("signal too short: need at least {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },

    #[error("infeasible design problem: {0}")]
    InfeasibleProblem(String),

    #[error("solver failed: {0}")]
    SolverFailure(String),

    #[error("singular sensitivity at bin {bin}: |1 + T| = {magnitude:e}")]
    SingularSensitivity { bin: usize, magnitude: f64 },

    #[error("curve passes within {distance:e} of the test point at sample {index}")]
    MarginalCurve { index: usize, distance: f64 },

    #[error("closed loop is unstable (winding number {winding})")]
    Unstable { winding: i64 },

    #[error("band [{f_lo}, {f_hi}] Hz contains no bins")]
    EmptyBand { f_lo: f64, f_hi: f64 },

    #[error("zero reference PSD at bin {bin}")]
    ZeroReference { bin: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}
