use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {source}", step_label(*.t, *.k))]
    AtStep {
        t: Option<usize>,
        k: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated IDX file (needed {needed} bytes, found {found})")]
    Truncated { path: PathBuf, needed: usize, found: usize },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Attach the outer step index, keeping any inner index already present.
    pub fn in_outer_step(self, t: usize) -> Self {
        match self {
            Error::AtStep { t: None, k, source } => Error::AtStep { t: Some(t), k, source },
            e @ Error::AtStep { .. } => e,
            other => Error::AtStep {
                t: Some(t),
                k: None,
                source: Box::new(other),
            },
        }
    }

    pub fn in_inner_step(self, k: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            other => Error::AtStep {
                t: None,
                k: Some(k),
                source: Box::new(other),
            },
        }
    }

    /// (outer, inner) coordinates of a step failure, if any.
    pub fn step(&self) -> Option<(Option<usize>, Option<usize>)> {
        match self {
            Error::AtStep { t, k, .. } => Some((*t, *k)),
            _ => None,
        }
    }

    /// True when the failure is numerical (NaN/Inf) rather than a bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::AtStep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

fn step_label(t: Option<usize>, k: Option<usize>) -> String {
    match (t, k) {
        (Some(t), Some(k)) => format!("at outer step {t}, inner step {k}"),
        (Some(t), None) => format!("at outer step {t}"),
        (None, Some(k)) => format!("at inner step {k}"),
        (None, None) => "in step".to_string(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
