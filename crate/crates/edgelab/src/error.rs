//! Error taxonomy shared across the workspace.
//!
//! Every failure mode is explicit: callers can distinguish a misconfigured
//! experiment from a numerical blow-up or a malformed artifact on disk, and
//! tests assert on the variant rather than on message text.

use thiserror::Error;

/// Unified error type for the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A set of options that can never produce a meaningful run
    /// (e.g. a verifier-based method without a verifier, or an
    /// evidence-masked method with masking disabled).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input violated a documented precondition of an operation
    /// (mismatched lengths, token id out of range, context overflow).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical invariant failed at runtime (non-finite loss or
    /// gradient, probability mass that does not normalize).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The sampler was asked to draw from an empty or zero-mass set.
    #[error("sampler error: {0}")]
    Sampler(String),

    /// A synthetic task could not be constructed to satisfy its
    /// documented postconditions (e.g. the base model failed a
    /// pretraining health check).
    #[error("task construction failed: {0}")]
    TaskConstruction(String),

    /// A checkpoint, log, or config artifact on disk is malformed or
    /// inconsistent with what the caller expects.
    #[error("artifact error: {0}")]
    Artifact(String),

    /// Training aborted deliberately (e.g. a sustained non-finite-loss
    /// streak); the message carries the diagnostic context.
    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for transport over the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Numerical(_) => "numerical",
            Error::Sampler(_) => "sampler",
            Error::TaskConstruction(_) => "task_construction",
            Error::Artifact(_) => "artifact",
            Error::Aborted(_) => "aborted",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a [`Error::Config`].
pub fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

/// Shorthand for building a [`Error::Domain`].
pub fn domain_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
