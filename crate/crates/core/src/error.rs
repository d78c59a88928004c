use thiserror::Error;

/// Errors produced by the library. Variants are grouped by the pipeline
/// stage that raises them so the CLI can map them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    // --- configuration ---
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    // --- data loading / validation ---
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed row at line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },
    #[error("duplicate record for {signal} obs week {obs_week} issue week {issue_week}")]
    DuplicateRecord {
        signal: String,
        obs_week: u32,
        issue_week: u32,
    },
    #[error("issue week {issue_week} precedes observation week {obs_week} at line {line}")]
    IssueBeforeObservation {
        line: u64,
        obs_week: u32,
        issue_week: u32,
    },
    #[error("non-finite value at line {line}")]
    NonFiniteValue { line: u64 },
    #[error("unknown signal {0}")]
    UnknownSignal(String),
    #[error("no records for {signal} at observation week {obs_week}")]
    NoRecords { signal: String, obs_week: u32 },
    #[error("week {week} out of range (final week is {final_week})")]
    WeekOutOfRange { week: u32, final_week: u32 },
    #[error("empty sequence")]
    EmptySequence,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("backfill error undefined: stable value is zero")]
    UndefinedBErr,
    #[error("correlation undefined for constant input")]
    UndefinedCorrelation,
    #[error("MAPE undefined: truth value is zero at index {0}")]
    ZeroTruth(usize),
    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("all sequences skipped in group {0}")]
    EmptyGroup(String),
    #[error("no eligible observation weeks before week {0}")]
    NoEligibleWeeks(u32),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("checkpoint was pretrained for week {checkpoint_week}, requested week {requested_week} (pass --reuse-pretrain to override)")]
    StaleCheckpoint {
        checkpoint_week: u32,
        requested_week: u32,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    // --- numerics ---
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter {param} at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("training diverged: final loss {final_loss} not below initial loss {initial_loss}")]
    TrainingDiverged { initial_loss: f64, final_loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse classification used by the CLI for exit codes.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidConfig(_) => ErrorKind::Config,
            ShapeMismatch(_) | NonFiniteGradient { .. } | TrainingDiverged { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}
