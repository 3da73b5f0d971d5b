use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("loss is {loss} at step {step}")]
    Diverged { step: u64, loss: f64 },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("checkpoint has {checkpoint} keypoints, dataset has {dataset}")]
    KeypointMismatch { checkpoint: usize, dataset: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Core(#[from] rhg_core::Error),
    #[error(transparent)]
    Synth(#[from] rhg_synth::Error),
}

impl Error {
    /// Stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Diverged { .. } => "diverged",
            Error::GradCheck(_) => "gradcheck",
            Error::KeypointMismatch { .. } => "keypoint_mismatch",
            Error::Io { .. } => "io",
            Error::Core(_) => "core",
            Error::Synth(rhg_synth::Error::Config(_)) => "config",
            Error::Synth(rhg_synth::Error::Io { .. }) => "io",
            Error::Synth(_) => "data",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err<E>(path: impl Into<PathBuf>) -> impl FnOnce(E) -> Error
where
    E: std::error::Error + Send + Sync + 'static,
{
    let path = path.into();
    move |e| Error::Io {
        path,
        source: Box::new(e),
    }
}
