use std::fmt::Display;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Io,
}

/// Printed as `{stage, message}`; exit code 1 for validation, 2 for I/O.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub stage: String,
    pub message: String,
    #[serde(skip)]
    pub kind: Kind,
}

impl CliError {
    pub fn validation(stage: &str, message: impl Display) -> Self {
        CliError {
            stage: stage.into(),
            message: message.to_string(),
            kind: Kind::Validation,
        }
    }

    pub fn io(stage: &str, path: &Path, err: impl Display) -> Self {
        CliError {
            stage: stage.into(),
            message: format!("{}: {err}", path.display()),
            kind: Kind::Io,
        }
    }

    /// Core errors: I/O stays I/O, everything else is a validation failure.
    pub fn core(stage: &str, path: Option<&Path>, err: her2_core::Error) -> Self {
        let kind = match err {
            her2_core::Error::Io(_) => Kind::Io,
            _ => Kind::Validation,
        };
        let message = match path {
            Some(p) => format!("{}: {err}", p.display()),
            None => err.to_string(),
        };
        CliError {
            stage: stage.into(),
            message,
            kind,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Validation => 1,
            Kind::Io => 2,
        }
    }
}
