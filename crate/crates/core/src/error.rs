use std::path::PathBuf;

/// Errors produced anywhere in the try-on pipeline.
///
/// The variants map onto the process exit codes used by the command line
/// front end (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("parameter out of range: {0}")]
    ParameterRange(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("missing dependency: {what} (run `{command}` first)")]
    Dependency { what: String, command: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dependency(what: impl Into<String>, command: impl Into<String>) -> Self {
        Error::Dependency {
            what: what.into(),
            command: command.into(),
        }
    }

    /// Process exit code: 2 validation, 3 dependency, 4 numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Argument(_)
            | Error::ParameterRange(_)
            | Error::Usage(_)
            | Error::Json(_) => 2,
            Error::Dependency { .. } => 3,
            Error::Numerical(_) | Error::Diverged { .. } => 4,
            _ => 1,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
