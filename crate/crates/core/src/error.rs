use thiserror::Error;

/// Errors surfaced by the sampler, its backends and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of range or inconsistent.
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    /// Input data is malformed (non-finite values, bad pixels, corrupt files).
    #[error("invalid data: {0}")]
    Data(String),

    /// A condition handle could not be resolved by the backend.
    #[error("condition error: {0}")]
    Condition(String),

    /// The denoiser backend failed (transport or remote fault).
    #[error("backend error: {0}")]
    Backend(String),

    /// A trajectory run stopped part-way; the partial trajectories are retained.
    #[error("run interrupted after {completed} completed steps: {source}")]
    Interrupted {
        completed: usize,
        partial: Box<crate::engine::PartialRun>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field,
            reason: reason.into(),
        }
    }

    /// Strips `Interrupted` wrappers down to the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Interrupted { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
