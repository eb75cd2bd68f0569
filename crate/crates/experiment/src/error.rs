use cvt_core::CvtError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training aborted ({method}, seed {seed}): {source}")]
    Abort {
        method: String,
        seed: u64,
        #[source]
        source: CvtError,
    },
    #[error(transparent)]
    Core(CvtError),
    #[error("{0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<CvtError> for ExperimentError {
    fn from(e: CvtError) -> Self {
        match e {
            CvtError::Config(m) => ExperimentError::Config(m),
            other => ExperimentError::Core(other),
        }
    }
}

impl ExperimentError {
    /// Process exit status: 2 for configuration errors, 3 for aborted
    /// training, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Abort { .. } => 3,
            _ => 1,
        }
    }
}
