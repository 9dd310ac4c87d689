use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("payload length mismatch: expected {expected} bits, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("odd spatial dimension {height}x{width}: downsampling needs even height and width")]
    OddDimension { height: usize, width: usize },

    #[error("spatial dimensions {height}x{width} must be divisible by {divisor}")]
    DimensionNotDivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("input {height}x{width} too small for the critic (minimum {min}x{min})")]
    ShapeTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("SSIM window {window} does not fit into a {height}x{width} image")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("image {height}x{width} too small for MS-SSIM with {scales} scales: minimum side is {min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        scales: usize,
        min: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: non-finite {component} loss (encode={encode}, decode={decode}, steganalysis={steganalysis})")]
    NonFiniteLoss {
        component: &'static str,
        encode: f64,
        decode: f64,
        steganalysis: f64,
    },

    #[error("unknown variant '{0}'")]
    UnknownVariant(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("cardinality mismatch: {covers} covers vs {containers} containers")]
    CardinalityMismatch { covers: usize, containers: usize },

    #[error("payload of {requested} bits exceeds capacity of {capacity} bits")]
    CapacityExceeded { requested: usize, capacity: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
