use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants map onto the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty scene")]
    EmptyScene,

    #[error("empty assignment: {0}")]
    EmptyAssignment(String),

    #[error("transport error{}: {message}", frame_suffix(*.frame))]
    Transport {
        message: String,
        frame: Option<u32>,
        retryable: bool,
    },

    #[error("protocol error: {message} (raw payload: {raw})")]
    Protocol { message: String, raw: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

fn frame_suffix(frame: Option<u32>) -> String {
    frame.map(|f| format!(" (frame {f})")).unwrap_or_default()
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn transport(message: impl Into<String>, frame: Option<u32>) -> Self {
        Error::Transport {
            message: message.into(),
            frame,
            retryable: true,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// 2 for configuration/argument problems, 3 for backend failures, 4 for data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Transport { .. } | Error::Protocol { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
