use std::path::PathBuf;

/// Harness failures, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            s @ HarnessError::Stage { .. } => s,
            other => HarnessError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Process exit code: 2 config, 3 data (including IO), 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Io { .. } => 3,
            HarnessError::Numeric(_) => 4,
            HarnessError::Stage { source, .. } => source.exit_code(),
        }
    }
}

impl From<decsal_core::Error> for HarnessError {
    fn from(e: decsal_core::Error) -> Self {
        use decsal_core::Error as E;
        match e {
            E::NonFinite(_) => HarnessError::Numeric(e.to_string()),
            E::Config(_) | E::LayerOutOfRange { .. } | E::TauOutOfRange { .. } => HarnessError::Config(e.to_string()),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
