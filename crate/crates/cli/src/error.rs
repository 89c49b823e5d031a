use thiserror::Error;

use crate::image_io::ImageError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Codec(#[from] dpcodec::Error),

    #[error(transparent)]
    Image(#[from] ImageError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for usage errors, 2 for bad input data, 3 for broken invariants.
    pub fn exit_code(&self) -> u8 {
        use dpcodec::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Codec(E::Config(_) | E::OutOfRange { .. }) => 1,
            CliError::Codec(E::NonFinite(_) | E::NonScalarLoss(_) | E::TrainableFrozen(_)) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
