use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("nonpositive depth {value} at pixel {index}")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("camera {frame} lies inside scene geometry")]
    CameraInsideGeometry { frame: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
