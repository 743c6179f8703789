use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument violates a documented precondition (non-finite values,
    /// non-rigid poses, out-of-range parameters).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Arguments are individually valid but inconsistent with each other
    /// (frame mismatch, missing pair prediction, shape mismatch).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration cannot be honoured, e.g. a decoder without a
    /// least-squares inverse.
    #[error("configuration error: {0}")]
    Config(String),
    /// A value became non-finite inside an iterative numerical routine.
    #[error("numerical failure in {context} at step {step}")]
    Numerical { context: String, step: usize },
    /// The alignment objective diverged.
    #[error("optimization failed at iteration {iteration}: {reason}")]
    OptimizationFailure { iteration: usize, reason: String },
    /// No valid reference pixels were available to build a point cloud.
    #[error("empty scene: {0}")]
    EmptyScene(String),
    /// A pipeline stage failed; wraps the stage's own error.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, step: usize) -> Self {
        Error::Numerical {
            context: context.into(),
            step,
        }
    }

    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the root cause is numerical (non-finite values or
    /// optimizer divergence).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. } | Error::OptimizationFailure { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
