use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the library. Layer- and shard-level failures carry the
/// index of the offending unit so a coordinator can report it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: shape mismatch, {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },

    #[error("{context}: non-finite input")]
    NonFinite { context: &'static str },

    #[error("{context}: {detail}")]
    InvalidArgument {
        context: &'static str,
        detail: String,
    },

    #[error("Cholesky factorization failed after jitter escalation")]
    Cholesky,

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shard {shard_id}: {source}")]
    Shard {
        shard_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shard partition invalid: {0}")]
    Partition(String),

    #[error("parameter vector length mismatch: expected {expected}, got {got}")]
    ParamLength { expected: usize, got: usize },

    #[error("worker protocol: {0}")]
    Protocol(String),

    #[error("stale worker: coordinator at parameter version {expected}, reply carried {got}")]
    StaleWorker { expected: u64, got: u64 },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("{file}:{line}: {detail}")]
    DataFormat {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub fn invalid(context: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context,
            detail: detail.into(),
        }
    }

    /// Annotate an error with the layer it came from.
    pub fn in_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            other => Error::Layer {
                layer,
                source: Box::new(other),
            },
        }
    }

    /// Annotate an error with the shard it came from.
    pub fn in_shard(self, shard_id: usize) -> Self {
        match self {
            e @ Error::Shard { .. } => e,
            other => Error::Shard {
                shard_id,
                source: Box::new(other),
            },
        }
    }

    /// True for failures of the numerics (as opposed to structure): a line
    /// search may treat such a trial point as infinitely bad and retreat.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Cholesky | Error::NonFinite { .. } => true,
            Error::Layer { source, .. } | Error::Shard { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
