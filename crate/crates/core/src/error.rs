use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = SegError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tensor is not recorded on this tape")]
    NotOnTape,

    #[error("backward requires a scalar (1,1,1,1) loss, got {0}")]
    NonScalarLoss(Shape),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("label {label} out of range (expected < {classes}){}", .context.as_deref().map(|c| format!(" in {c}")).unwrap_or_default())]
    LabelRange {
        label: u32,
        classes: usize,
        context: Option<String>,
    },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("format error{}: {reason}", .path.as_ref().map(|p| format!(" in {}", p.display())).unwrap_or_default())]
    Format {
        path: Option<PathBuf>,
        reason: String,
    },

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SegError {
    pub(crate) fn format(reason: impl Into<String>) -> Self {
        SegError::Format {
            path: None,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SegError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a path to format errors that lack one.
    pub(crate) fn at_path(self, p: &std::path::Path) -> Self {
        match self {
            SegError::Format { path: None, reason } => SegError::Format {
                path: Some(p.to_path_buf()),
                reason,
            },
            other => other,
        }
    }
}
