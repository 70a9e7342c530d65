use std::path::PathBuf;

/// Errors produced by the adaptation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The input cannot produce a prompt or measurement (empty mask, too few pixels).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training fault in `{component}`: {detail}")]
    TrainingFault { component: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context} (record {index}): {detail}")]
    Parse {
        context: String,
        index: usize,
        detail: String,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, index: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            index,
            detail: detail.into(),
        }
    }
}
