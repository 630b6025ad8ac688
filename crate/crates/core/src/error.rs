use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Skeleton schema violation. `line` points into the schema file when known.
    #[error("skeleton schema error{}: {message}", fmt_line(*.line))]
    Schema {
        line: Option<usize>,
        message: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("singular bone {bone} ({name}): zero length with nonzero gradient demand")]
    SingularBone { bone: usize, name: String },

    #[error("malformed sample {id}: {message}")]
    MalformedSample { id: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {message}{}", fmt_ckpt(.last_good))]
    Divergence {
        step: u64,
        message: String,
        last_good: Option<PathBuf>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    /// Dataset or record validation failure with a 1-based line number.
    #[error("{}line {line}: {message}", fmt_path(.path))]
    Data {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_line(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

fn fmt_ckpt(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => " (no checkpoint written yet)".to_string(),
    }
}

fn fmt_path(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!("{}: ", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub fn schema(message: impl Into<String>) -> Self {
        Error::Schema {
            line: None,
            message: message.into(),
        }
    }

    pub fn data(line: usize, message: impl Into<String>) -> Self {
        Error::Data {
            path: None,
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file path to a data error that was produced from an in-memory buffer.
    pub fn with_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Data { line, message, .. } => Error::Data {
                path: Some(path.into()),
                line,
                message,
            },
            other => other,
        }
    }

    /// Process exit code for this error class: 2 usage/config, 3 divergence, 4 data validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Io { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::Schema { .. }
            | Error::Data { .. }
            | Error::MalformedSample { .. }
            | Error::Dimension { .. }
            | Error::DegeneratePose(_)
            | Error::SingularBone { .. } => 4,
        }
    }
}
