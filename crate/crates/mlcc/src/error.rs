use std::path::PathBuf;

/// Harness failures, split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Core(#[from] mlcc_core::Error),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    /// 2 for bad invocations, configs and input files; 1 for failures while
    /// running.
    pub fn exit_code(&self) -> i32 {
        use mlcc_core::Error as E;
        match self {
            HarnessError::Usage(_) | HarnessError::Read { .. } | HarnessError::Parse { .. } => 2,
            HarnessError::Core(E::Config(_) | E::Domain(_) | E::LengthMismatch { .. }) => 2,
            HarnessError::Core(_) | HarnessError::Write { .. } | HarnessError::Runtime(_) => 1,
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> HarnessError {
    HarnessError::Usage(msg.into())
}
