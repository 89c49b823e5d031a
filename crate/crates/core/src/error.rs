use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{what} = {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("frozen parameter is marked trainable: {0}")]
    TrainableFrozen(String),

    #[error("symbol {symbol} outside table support [{lo}, {hi}]")]
    SymbolOutOfSupport { symbol: i32, lo: i32, hi: i32 },

    #[error("entropy coding error: {0}")]
    Entropy(String),

    #[error("truncated range-coded payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("trailing bytes after range-coded payload: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("length mismatch: header declares {declared} bytes, found {actual}")]
    LengthMismatch { declared: usize, actual: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("model/bitstream mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn range(what: &'static str, value: impl ToString, range: impl Into<String>) -> Self {
        Error::OutOfRange {
            what,
            value: value.to_string(),
            range: range.into(),
        }
    }
}
