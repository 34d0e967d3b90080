use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_COMPUTE: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed{}: {source}", seed.map(|s| format!(" for seed {s}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        seed: Option<u64>,
        #[source]
        source: rdiff_core::Error,
    },
    #[error("missing artifact {path}: run `rdiff {stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage { .. } | CliError::MissingArtifact { .. } | CliError::Io { .. } => EXIT_COMPUTE,
            CliError::Validation(_) => EXIT_VALIDATION,
        }
    }

    pub(crate) fn stage(stage: &'static str, seed: Option<u64>) -> impl FnOnce(rdiff_core::Error) -> CliError {
        move |source| CliError::Stage { stage, seed, source }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
