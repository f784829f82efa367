use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("frame mismatch: {0}")]
    Frame(String),

    #[error("undefined measure: {0}")]
    UndefinedMeasure(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("vocabulary error: unknown class {name:?} at feature {index}")]
    Vocabulary { name: String, index: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("stage `{stage}` failed for slide {slide_id}: {source}")]
    Stage {
        stage: &'static str,
        slide_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error grouping, used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Format,
    Vocabulary,
    Geometry,
    Configuration,
    Capacity,
    Io,
    Other,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Other => 1,
            ErrorFamily::Format => 2,
            ErrorFamily::Vocabulary => 3,
            ErrorFamily::Geometry => 4,
            ErrorFamily::Configuration => 5,
            ErrorFamily::Capacity => 6,
            ErrorFamily::Io => 7,
        }
    }
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Dimension(_)
            | Error::Format(_)
            | Error::Json(_)
            | Error::DegenerateHistogram(_) => ErrorFamily::Format,
            Error::Vocabulary { .. } => ErrorFamily::Vocabulary,
            Error::Geometry(_) | Error::Frame(_) | Error::UndefinedMeasure(_) => {
                ErrorFamily::Geometry
            }
            Error::Config(_) => ErrorFamily::Configuration,
            Error::Capacity(_) => ErrorFamily::Capacity,
            Error::Io { .. } => ErrorFamily::Io,
            Error::Training(_) | Error::Report(_) => ErrorFamily::Other,
            Error::Stage { source, .. } => source.family(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.family().exit_code()
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, slide_id: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                slide_id: slide_id.to_string(),
                source: Box::new(e),
            },
        }
    }
}
