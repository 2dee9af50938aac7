use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("loss is not finite at step {step}")]
    NanLoss { step: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,

    #[error("gradient buffer of `{0}` was not reset since the last step")]
    GradNotReset(String),

    #[error("tape node {node} references a later node {input}")]
    GraphCycle { node: usize, input: usize },

    #[error("loss does not depend on any trainable leaf")]
    DetachedLoss,

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange { what: &'static str, index: usize, size: usize },

    #[error("matrix is singular: {0}")]
    Singular(&'static str),

    #[error("rank-deficient steering basis at column {column}")]
    RankDeficient { column: usize },

    #[error("modality absent: {0}")]
    ModalityAbsent(&'static str),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("frozen parameter `{0}` changed during training")]
    FreezeViolation(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { kind, detail: detail.into() }
    }

    /// True for errors originating in floating-point arithmetic rather than
    /// user input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NonFiniteActivation { .. }
                | Error::NanLoss { .. }
                | Error::Singular(_)
                | Error::RankDeficient { .. }
                | Error::FreezeViolation(_)
        )
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            3
        } else {
            2
        }
    }
}
