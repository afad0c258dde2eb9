//! Command errors and their process exit codes.

use eegtok_core::checkpoint::CheckpointError;
use eegtok_core::metrics::MetricError;
use eegtok_core::profiler::ProfileError;
use eegtok_core::signal::SignalError;
use eegtok_core::topology::TopologyError;
use eegtok_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 2 usage/config, 3 data/dependency, 4 transport, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Data(_) | Self::Dependency(_) => 3,
            Self::Transport(_) => 4,
            Self::Numeric(_) => 5,
        }
    }

    /// Prefixes the message with the pipeline stage that failed.
    pub fn at(self, stage: &str) -> Self {
        match self {
            Self::Usage(m) => Self::Usage(format!("{stage}: {m}")),
            Self::Config(m) => Self::Config(format!("{stage}: {m}")),
            Self::Data(m) => Self::Data(format!("{stage}: {m}")),
            Self::Dependency(m) => Self::Dependency(format!("{stage}: {m}")),
            Self::Transport(m) => Self::Transport(format!("{stage}: {m}")),
            Self::Numeric(m) => Self::Numeric(format!("{stage}: {m}")),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::Parameter(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Parameter(_) | ProfileError::LabelLeak { .. } => Self::Config(e.to_string()),
            ProfileError::Transport(_) | ProfileError::Parse { .. } => Self::Transport(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}
