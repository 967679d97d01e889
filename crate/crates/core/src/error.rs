use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing weights: expected {expected} values, got {got}")]
    MissingWeights { expected: usize, got: usize },
    #[error("layer `{0}` has an unsupported kind")]
    UnsupportedLayer(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("bundle format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("weight count mismatch: manifest declares {expected} values, blob holds {got}")]
    WeightCountMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("no scores to calibrate against")]
    EmptyScores,
    #[error("labels contain a single class; ROC is undefined")]
    DegenerateLabels,
    #[error("operating point {0} is outside (0, 1)")]
    InvalidOperatingPoint(f64),
    #[error("class index {index} out of range for {num_classes} classes")]
    BadClassIndex { index: usize, num_classes: usize },
    #[error("model head is not global_avg_pool -> dense: {0}")]
    IncompatibleHead(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad caller input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Divergence { .. })
    }
}
