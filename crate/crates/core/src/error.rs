use thiserror::Error;

/// Errors surfaced by the fusion toolkit, grouped so callers can map them
/// to distinct exit classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}{}", context_suffix(.context))]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("invalid parameter {name}: {message}")]
    Parameter { name: &'static str, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error in {path}: {message}")]
    Data { path: String, message: String },

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },

    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("training aborted: non-finite value in {0}")]
    Training(String),

    #[error("gradient verification failed: {component} relative error {error:.3e} exceeds {threshold:.3e}")]
    Verification {
        component: String,
        error: f64,
        threshold: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub fn dimension(axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
            context: String::new(),
        }
    }

    pub fn dimension_ctx(
        axis: &'static str,
        expected: usize,
        actual: usize,
        context: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
