use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("simulation diverged: `{variable}` is not finite at step {step}")]
    Divergence { variable: String, step: usize },

    #[error("missing required columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown module `{0}`")]
    UnknownModule(String),

    #[error("module `{module}` has no parameter `{parameter}`")]
    UnknownParameter { module: String, parameter: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("design capacity exceeded: 2^{modules} rows exceeds cap of {cap}")]
    Capacity { modules: usize, cap: usize },

    #[error("rank-deficient regressor matrix; dependent columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("row {row} has leverage 1; HC3 covariance undefined")]
    PerfectLeverage { row: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch} (loss is not finite); try a smaller step size")]
    TrainingDiverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a time/row index to errors that carry one.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Divergence { variable, .. } => Error::Divergence { variable, step },
            Error::MissingColumns(cols) => {
                Error::Schema(format!("row {step}: missing required columns: {}", cols.join(", ")))
            }
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
