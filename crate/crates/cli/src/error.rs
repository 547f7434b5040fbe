use std::path::{Path, PathBuf};

use serde::Serialize;

/// Process exit codes. Listed in `susmap --help`.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const INVALID: i32 = 4;
    pub const CAPACITY: i32 = 5;
    pub const NUMERICAL: i32 = 6;
    pub const ESTIMATION: i32 = 7;
    pub const INTEGRITY: i32 = 8;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    Integrity { path: PathBuf, msg: String },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<CliError> },
    #[error(transparent)]
    Core(#[from] susmap_core::Error),
    #[error("{0}")]
    Internal(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        CliError::Stage { stage, source: Box::new(self) }
    }

    pub fn exit_code(&self) -> i32 {
        use susmap_core::Error as E;
        match self {
            CliError::Io { .. } => exit::IO,
            CliError::Format { .. } | CliError::Config(_) => exit::INVALID,
            CliError::Integrity { .. } => exit::INTEGRITY,
            CliError::Stage { source, .. } => source.exit_code(),
            CliError::Internal(_) => exit::INTERNAL,
            CliError::Core(e) => match e {
                E::InvalidInput(_) | E::Index(_) => exit::INVALID,
                E::Capacity(_) => exit::CAPACITY,
                E::Numerical(_) | E::DegenerateLikelihood(_) => exit::NUMERICAL,
                E::EstimationFailed(_) | E::Mesh(_) | E::Coverage { .. } | E::Rank(_) | E::UndefinedCorrelation(_) => {
                    exit::ESTIMATION
                }
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Format { .. } => "format",
            CliError::Config(_) => "config",
            CliError::Integrity { .. } => "integrity",
            CliError::Stage { source, .. } => source.kind(),
            CliError::Internal(_) => "internal",
            CliError::Core(_) => match self.exit_code() {
                exit::CAPACITY => "capacity",
                exit::NUMERICAL => "numerical",
                exit::ESTIMATION => "estimation",
                _ => "invalid-input",
            },
        }
    }

    fn path(&self) -> Option<&Path> {
        match self {
            CliError::Io { path, .. } | CliError::Format { path, .. } | CliError::Integrity { path, .. } => Some(path),
            CliError::Stage { source, .. } => source.path(),
            _ => None,
        }
    }

    fn stage(&self) -> Option<&'static str> {
        match self {
            CliError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// One-line JSON record written to stderr on failure.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            path: Option<String>,
            #[serde(skip_serializing_if = "Option::is_none")]
            stage: Option<&'a str>,
        }
        let r = Record {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
            path: self.path().map(|p| p.display().to_string()),
            stage: self.stage(),
        };
        serde_json::to_string(&r).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}
