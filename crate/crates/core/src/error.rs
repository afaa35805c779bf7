use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor of shape {shape:?} needs {expected} values, got {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: extent {extent} with padding {padding}, kernel {kernel}, stride {stride} does not give an integral output extent")]
    NonIntegralExtent {
        op: &'static str,
        extent: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: window {window:?} does not fit padded input {input:?}")]
    WindowTooLarge {
        op: &'static str,
        window: (usize, usize),
        input: (usize, usize),
    },
    #[error("concat: input {index} has shape {found:?}, incompatible with {expected:?}")]
    ConcatMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("label at index {index} is {value}, expected 0 or 1")]
    InvalidLabel { index: usize, value: f64 },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("length mismatch: {left} scores vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("roc/auc undefined: need at least one positive and one negative sample")]
    SingleClass,
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("unknown parameter `{name}`")]
    UnknownParameter { name: String },
    #[error("invalid model spec at {stage}: {reason}")]
    InvalidSpec { stage: String, reason: String },
    #[error("spatial extent underflow at {stage}: {height}x{width}")]
    SpatialUnderflow {
        stage: String,
        height: usize,
        width: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
