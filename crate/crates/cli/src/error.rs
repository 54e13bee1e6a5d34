use std::fmt::Display;
use std::path::Path;

use bayesrake::Error;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Unreadable or unparseable input or configuration.
    Input,
    /// Margins that no cell table can reproduce.
    Infeasible,
    /// No finite starting point for the sampler.
    Initialization,
    Other,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Infeasible => 3,
            ErrorKind::Initialization => 4,
            ErrorKind::Other => 1,
        }
    }
}

/// Failure of a command, written as a JSON error record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
            path: None,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            kind: ErrorKind::Input,
            message: format!("{}: {err}", path.display()),
            path: Some(path.display().to_string()),
        }
    }

    pub fn parse(path: &Path, err: impl Display) -> Self {
        Self {
            kind: ErrorKind::Input,
            message: format!("{}: {err}", path.display()),
            path: Some(path.display().to_string()),
        }
    }

    pub fn config(err: impl Display) -> Self {
        Self::new(ErrorKind::Input, err)
    }

    /// Errors while reading `path`: always input errors.
    pub fn reading(path: &Path) -> impl Fn(Error) -> Self + '_ {
        move |e| {
            let mut c = Self::from(e);
            c.kind = ErrorKind::Input;
            c.path.get_or_insert_with(|| path.display().to_string());
            c
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn record(&self) -> String {
        serde_json::json!({ "error": self, "exit_code": self.exit_code() }).to_string()
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { .. } | Error::Csv { .. } | Error::Json(_) | Error::Config(_) => {
                ErrorKind::Input
            }
            Error::StructuralInfeasibility { .. } | Error::InfeasibleAnchor(_) => {
                ErrorKind::Infeasible
            }
            Error::Initialization { .. } => ErrorKind::Initialization,
            _ => ErrorKind::Other,
        };
        let path = match &e {
            Error::Io { path, .. } | Error::Csv { path, .. } => Some(path.clone()),
            _ => None,
        };
        Self {
            kind,
            message: e.to_string(),
            path,
        }
    }
}
