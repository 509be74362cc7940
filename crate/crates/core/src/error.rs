use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("integrity error: duplicate cell (row {row:?}, col {col:?}) on line {line}")]
    DuplicateCell { row: String, col: String, line: u64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("variance component estimation failed: {0}")]
    Estimation(String),

    #[error("singular design: {0}")]
    Singular(String),

    #[error("backfitting did not converge after {iterations} iterations (last relative change {last_change:e})")]
    Diverged {
        iterations: usize,
        last_change: f64,
        trace: Vec<f64>,
    },

    #[error("size cap exceeded: {what} = {size} > {cap}")]
    CapExceeded {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("sampled design is empty; resample with a different seed or larger S")]
    EmptyDesign,

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::DuplicateCell { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 1,
            Error::Singular(_) | Error::Estimation(_) | Error::Diagnostic(_) => 2,
            Error::Diverged { .. } => 3,
            Error::Invalid(_) | Error::CapExceeded { .. } | Error::EmptyDesign | Error::Config(_) => 4,
        }
    }
}
