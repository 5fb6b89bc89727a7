//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MfldaError>;

/// Errors raised by the library. Each variant maps onto one CLI exit category.
#[derive(Debug, Error)]
pub enum MfldaError {
    #[error("time {time} outside domain [{start}, {end}]")]
    Domain { time: f64, start: f64, end: f64 },

    #[error("subject {subject}: {found} distinct time points, need at least {required}")]
    InsufficientData {
        subject: String,
        found: usize,
        required: usize,
    },

    #[error("no subjects left after smoothing ({excluded} excluded)")]
    EmptyModel { excluded: usize },

    #[error("class {class} has no members")]
    DegenerateClass { class: usize },

    #[error("within-class scatter is not estimable: {0}")]
    NonEstimable(String),

    #[error("degenerate scatter: {0}")]
    DegenerateScatter(String),

    #[error("leading eigenvalue {0} is not positive")]
    DegenerateEigenvalue(f64),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("time point {time}: {source}")]
    AtTimePoint {
        time: usize,
        #[source]
        source: Box<MfldaError>,
    },

    #[error("no viable tau range after {} updates", attempts.len())]
    NoViableRange { attempts: Vec<(f64, f64)> },

    #[error("stratification: {0}")]
    Stratification(String),

    #[error("operator of dimension {dim} exceeds the dense cap {cap}; use time-independent mode")]
    TooLarge { dim: usize, cap: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MfldaError {
    /// Machine-readable category used in CLI error messages.
    pub fn category(&self) -> &'static str {
        match self {
            MfldaError::Io(_) => "io",
            MfldaError::Config(_) => "config",
            MfldaError::Csv(_)
            | MfldaError::Json(_)
            | MfldaError::Data(_)
            | MfldaError::InsufficientData { .. }
            | MfldaError::EmptyModel { .. }
            | MfldaError::DegenerateClass { .. }
            | MfldaError::Domain { .. }
            | MfldaError::Stratification(_) => "data",
            MfldaError::AtTimePoint { source, .. } => source.category(),
            _ => "numeric",
        }
    }

    /// Process exit code: 2 io, 3 config, 4 numeric, 5 data.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "io" => 2,
            "config" => 3,
            "data" => 5,
            _ => 4,
        }
    }
}
