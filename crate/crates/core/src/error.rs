use thiserror::Error;

/// Errors raised by the simulation, averaging and optimisation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("model error: non-finite {map} output at {input}")]
    Model { map: &'static str, input: String },

    #[error("blow-up in {kind} path at step {last_finite_index}: |state| exceeded {threshold:e}")]
    BlowUp {
        kind: &'static str,
        last_finite_index: usize,
        threshold: f64,
    },

    #[error("numeric error: {message}")]
    Numeric { message: String, history: Vec<f64> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            message: msg.into(),
            history: Vec::new(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
