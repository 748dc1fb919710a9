use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("dataset has no transitions")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("history is empty")]
    EmptyHistory,
    #[error("out-of-distribution split requested but the environment has no ood range")]
    MissingOodRange,
    #[error("step called on a finished episode")]
    EpisodeFinished,
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("medium policy calibration failed; closest noise {closest_noise} gave quality ratio {closest_ratio}")]
    CalibrationFailed { closest_noise: f64, closest_ratio: f64 },
    #[error("datasets disagree on tasks: {0}")]
    TaskMismatch(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset file line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("world model required but not provided")]
    MissingWorldModel,
    #[error(transparent)]
    Nn(#[from] metadt_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
