use thiserror::Error;

pub type Result<T> = std::result::Result<T, SlrError>;

#[derive(Debug, Error)]
pub enum SlrError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("fusion error: {0}")]
    Fusion(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("stage {stage}: {msg}")]
    Stage { stage: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SlrError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        SlrError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        SlrError::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            SlrError::Config(_) => 2,
            SlrError::Format { .. } => 3,
            SlrError::Input(_) => 4,
            SlrError::Fusion(_) => 5,
            SlrError::Numeric(_) => 6,
            SlrError::Io(_) => 7,
            SlrError::Mode(_) => 8,
            SlrError::Validation(_) => 9,
            SlrError::Dimension { .. } | SlrError::Stage { .. } => 10,
            SlrError::Data(_) => 11,
        }
    }
}
