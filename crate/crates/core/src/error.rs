use thiserror::Error;

use crate::conllu::ConlluError;
use crate::cpg::CpgError;
use crate::encoder::EncoderError;
use crate::harness::bundle::BundleError;
use crate::harness::config::ConfigError;
use crate::numcore::{ShapeError, TapeError};
use crate::parser::ParserError;
use crate::typology::TypologyError;

/// Broad class of a failure, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Internal => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Conllu { path: String, source: ConlluError },
    #[error(transparent)]
    Typology(#[from] TypologyError),
    #[error(transparent)]
    Cpg(#[from] CpgError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Parser(#[from] ParserError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Tape(#[from] TapeError),
    #[error("internal error: {0}")]
    Shape(#[from] ShapeError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(ConfigError::Io(_)) => ErrorKind::Data,
            Error::Config(_) => ErrorKind::Usage,
            Error::Tape(_) | Error::Shape(_) => ErrorKind::Internal,
            Error::Encoder(EncoderError::Tape(_)) | Error::Parser(ParserError::Tape(_)) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
