use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("degenerate support for episode class {class}, shot {shot}: mask selects no points")]
    DegenerateSupport { class: usize, shot: usize },
    #[error("degenerate background: no support point lies outside the foreground masks")]
    DegenerateBackground,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward has already been run on this tape")]
    BackwardTwice,
    #[error("variable does not belong to this tape")]
    ForeignVariable,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("sampling exhausted for class {class}: {reason}")]
    SamplingExhausted { class: usize, reason: String },
    #[error("no embedding entry for class `{0}`")]
    MissingClass(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("label {label} out of range, expected at most {max}")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
