use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("vector {index} is zero after mean-centering and cannot be normalized")]
    DegenerateVector { index: usize },

    #[error("all points coincide; bandwidth would be zero")]
    ZeroBandwidth,

    #[error("affinity S({i},{j}) underflowed to zero; dissimilarity is unbounded")]
    NumericUnderflow { i: usize, j: usize },

    #[error("retraction step is rank deficient (smallest singular value {sigma_min:e})")]
    DegenerateStep { sigma_min: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("model construction failed: {0}")]
    Model(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the command-line tool.
    ///
    /// 2 = configuration or argument error, 3 = data or file error,
    /// 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 2,
            Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::DegenerateVector { .. }
            | Error::ZeroBandwidth
            | Error::NumericUnderflow { .. }
            | Error::DegenerateStep { .. }
            | Error::UndefinedMetric(_)
            | Error::Model(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
