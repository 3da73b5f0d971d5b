use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("{op} requires even spatial dims, got {height}x{width}")]
    OddSpatial {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("spatial dims {height}x{width} are not divisible by {divisor}")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("loss node must be scalar, has shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("target heatmap value {0} outside [0, 1]")]
    TargetRange(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
