use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Core(#[from] bilevel_core::Error),

    #[error("gradient check failed: max relative error {max_rel_err:e} exceeds {tol:e}")]
    GradcheckFailed { max_rel_err: f64, tol: f64 },

    #[error("{failed} of {total} curse-of-dimensionality cells exceeded the bound")]
    CodFailed { failed: usize, total: usize },
}

impl HarnessError {
    /// Process exit status: 1 for configuration and I/O problems, 2 for
    /// numerical failures and failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(e) if e.is_numeric() => 2,
            HarnessError::GradcheckFailed { .. } | HarnessError::CodFailed { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
