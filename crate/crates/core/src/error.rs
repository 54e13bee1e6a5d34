use thiserror::Error;

/// Errors raised by the raking and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no raking variables supplied")]
    NoVariables,

    #[error("invalid raking variable {name:?}: {reason}")]
    InvalidVariable { name: String, reason: String },

    #[error("unit {row}: {label:?} is not a level of variable {variable:?}")]
    UnknownLevel {
        row: usize,
        variable: String,
        label: String,
    },

    #[error("unknown variable {0:?}")]
    UnknownVariable(String),

    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("population total is zero")]
    ZeroTotal,

    #[error(
        "structurally infeasible margin {margin}: target {target} but every contributing sample cell is empty"
    )]
    StructuralInfeasibility { margin: String, target: f64 },

    #[error("raking did not converge after {iterations} iterations (max deviation {deviation:e})")]
    NotConverged { iterations: usize, deviation: f64 },

    #[error("anchor point does not reproduce the margins (max deviation {0:e})")]
    InfeasibleAnchor(f64),

    #[error("basis columns are linearly dependent")]
    RankDeficient,

    #[error("null space is empty; the margins determine every cell")]
    EmptyNullSpace,

    #[error("log density is not finite at the given state")]
    NonFiniteDensity,

    #[error("no finite initial point after {attempts} attempts: {reason}")]
    Initialization { attempts: usize, reason: String },

    #[error("domain {0:?} has no cells")]
    EmptyDomain(String),

    #[error("draw {0} has zero total population")]
    ZeroTotalDraw(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
