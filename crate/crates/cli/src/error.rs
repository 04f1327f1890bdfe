use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing artifact {}", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("stale artifact {}: {detail}", path.display())]
    StaleArtifact { path: PathBuf, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("certification failed: {0}")]
    Certification(String),

    #[error(transparent)]
    Core(#[from] pgdm::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json { path: path.to_path_buf(), source }
    }

    pub fn stale(path: &Path, detail: impl Into<String>) -> Self {
        Self::StaleArtifact { path: path.to_path_buf(), detail: detail.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingArtifact { .. } => "MissingArtifact",
            Self::StaleArtifact { .. } => "StaleArtifact",
            Self::Config(_) => "InvalidConfig",
            Self::Io { .. } => "Io",
            Self::Json { .. } => "Json",
            Self::Certification(_) => "CertificationFailed",
            Self::Core(e) => match e {
                pgdm::Error::InvalidInput(_) => "InvalidInput",
                pgdm::Error::Shape(_) => "ShapeMismatch",
                pgdm::Error::InvalidArity(_) => "InvalidArity",
                pgdm::Error::InvalidTarget(_) => "InvalidTarget",
                pgdm::Error::InvalidState(_) => "InvalidState",
                pgdm::Error::NumericalDivergence { .. } => "NumericalDivergence",
                pgdm::Error::Io(_) => "Io",
                pgdm::Error::Json(_) => "Json",
                pgdm::Error::Csv(_) => "Csv",
            },
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            Self::MissingArtifact { path } | Self::StaleArtifact { path, .. } | Self::Io { path, .. } | Self::Json { path, .. } => {
                v["path"] = json!(path);
            }
            Self::Core(pgdm::Error::NumericalDivergence { step }) => v["step"] = json!(step),
            _ => {}
        }
        v
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
