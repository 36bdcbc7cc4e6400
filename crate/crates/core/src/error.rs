use std::path::PathBuf;

use thiserror::Error;

use crate::registry::AssetKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One asset's environment link, as reported when a selection is rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionEntry {
    pub kind: AssetKind,
    pub asset: String,
    /// Human label of the environment-setup asset, `None` when unassociated.
    pub env: Option<String>,
}

fn describe(entries: &[SelectionEntry]) -> String {
    entries
        .iter()
        .map(|e| {
            format!(
                "{} '{}' -> {}",
                e.kind.label(),
                e.asset,
                e.env.as_deref().unwrap_or("(none)")
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not readable: {path}: {source}")]
    FileNotReadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("an asset of kind {kind} named '{name}' is already registered")]
    DuplicateName { name: String, kind: AssetKind },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown asset '{0}'")]
    UnknownAsset(String),

    #[error("asset reference '{0}' is ambiguous; use the asset id")]
    AmbiguousAsset(String),

    #[error("kind mismatch: {0}")]
    KindMismatch(String),

    #[error("selection is not associated with an environment: {}", describe(.0))]
    Unassociated(Vec<SelectionEntry>),

    #[error("selection spans incompatible environments: {}", describe(.0))]
    IncompatibleEnvironments(Vec<SelectionEntry>),

    #[error(
        "content of '{name}' changed since registration (expected {expected}, found {actual})"
    )]
    HashMismatch {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("registry store is locked by another process: {0}")]
    StoreLocked(PathBuf),

    #[error("timed out waiting for lock {0}")]
    LockTimeout(PathBuf),

    #[error("corrupt registry {path}: {reason}")]
    CorruptRegistry { path: PathBuf, reason: String },

    #[error("provisioning of environment {env_id} failed: {reason} (log: {log})")]
    ProvisionFailed {
        env_id: String,
        reason: String,
        log: PathBuf,
    },

    #[error("cannot spawn interpreter {path}: {reason}")]
    SpawnError { path: PathBuf, reason: String },

    #[error("invalid result: {0}")]
    InvalidResult(String),

    #[error("runner failure in run {run_id}: {reason}")]
    RunnerFailure { run_id: String, reason: String },

    #[error("unknown run '{0}'")]
    UnknownRun(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Attaches a context string to I/O errors.
pub(crate) trait IoContext<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(f(), e))
    }
}
