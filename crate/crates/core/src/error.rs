use std::fmt;

use serde::Serialize;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

/// One step of an iteratively reweighted least squares run, kept for
/// non-convergence reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub score_norm: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("cannot parse row {row}, column `{column}`: `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: {reason}")]
    InvariantViolation { row: usize, reason: String },

    #[error("empty cell: {0}")]
    EmptyCell(String),

    #[error("no external controls available: {0}")]
    NoExternalControls(String),

    #[error("model fit did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        trace: Vec<IterationRecord>,
    },

    #[error("design matrix is rank deficient; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("separation detected at iteration {iteration} (max |coef| = {max_coef:.2})")]
    SeparationDetected { iteration: usize, max_coef: f64 },

    #[error("residual variance in {0} is below the variance floor")]
    DegenerateVariance(String),

    #[error("influence function mean {mean:e} is not zero at the supplied point")]
    MismatchedPoint { mean: f64 },

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable machine-readable code.
    pub fn code(&self) -> ErrorCode {
        use Error::*;
        match self {
            MissingColumn(_) => ErrorCode::MissingColumn,
            Parse { .. } => ErrorCode::ParseError,
            InvariantViolation { .. } => ErrorCode::InvariantViolation,
            EmptyCell(_) => ErrorCode::EmptyCell,
            NoExternalControls(_) => ErrorCode::OverlapNoExternal,
            NonConvergence { .. } => ErrorCode::NonConvergence,
            RankDeficient { .. } => ErrorCode::RankDeficient,
            SeparationDetected { .. } => ErrorCode::SeparationDetected,
            DegenerateVariance(_) => ErrorCode::DegenerateVariance,
            MismatchedPoint { .. } => ErrorCode::MismatchedPoint,
            TooManyFailures { .. } => ErrorCode::ReplicateFailure,
            Config(_) => ErrorCode::ConfigError,
            Numeric(_) => ErrorCode::NumericFailure,
            Io(_) => ErrorCode::IoError,
            Csv(_) => ErrorCode::ParseError,
            Json(_) => ErrorCode::ParseError,
        }
    }

    pub fn class(&self) -> ErrorClass {
        self.code().class()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    MissingColumn,
    ParseError,
    InvariantViolation,
    EmptyCell,
    OverlapNoExternal,
    NonConvergence,
    RankDeficient,
    SeparationDetected,
    DegenerateVariance,
    MismatchedPoint,
    ReplicateFailure,
    ConfigError,
    NumericFailure,
    IoError,
}

impl ErrorCode {
    pub fn class(self) -> ErrorClass {
        use ErrorCode::*;
        match self {
            ConfigError => ErrorClass::Config,
            MissingColumn | ParseError | InvariantViolation | EmptyCell | OverlapNoExternal
            | IoError => ErrorClass::Data,
            NonConvergence | RankDeficient | SeparationDetected | DegenerateVariance
            | MismatchedPoint | ReplicateFailure | NumericFailure => ErrorClass::Numeric,
        }
    }

    pub fn as_str(self) -> &'static str {
        use ErrorCode::*;
        match self {
            MissingColumn => "MISSING_COLUMN",
            ParseError => "PARSE_ERROR",
            InvariantViolation => "INVARIANT_VIOLATION",
            EmptyCell => "EMPTY_CELL",
            OverlapNoExternal => "OVERLAP_NO_EXTERNAL",
            NonConvergence => "NON_CONVERGENCE",
            RankDeficient => "RANK_DEFICIENT",
            SeparationDetected => "SEPARATION_DETECTED",
            DegenerateVariance => "DEGENERATE_VARIANCE",
            MismatchedPoint => "MISMATCHED_POINT",
            ReplicateFailure => "REPLICATE_FAILURE",
            ConfigError => "CONFIG_ERROR",
            NumericFailure => "NUMERIC_FAILURE",
            IoError => "IO_ERROR",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
