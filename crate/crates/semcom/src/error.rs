//! Error types shared across the crate.
//!
//! Every error carries a stable machine-readable class so the CLI can map
//! failures onto distinct exit codes.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad schema, out-of-range parameter,
    /// incompatible family/bridge combination, shape mismatch.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input that cannot be framed: odd-length vectors where pairs are
    /// required, bit streams not divisible by the symbol width.
    #[error("framing error: {0}")]
    Framing(String),

    /// Numerically degenerate input (all-zero vector fed to the power
    /// normalizer, empty sample bank).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A caller violated an operation contract (e.g. non-normalized
    /// symbols handed to the AWGN channel).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged (NaN/inf loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Checkpoint or constellation file could not be parsed.
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    /// A stage tag on a checkpoint does not match what the operation needs.
    #[error("stage mismatch: {0}")]
    StageMismatch(String),

    /// Evaluation grid is missing cells required by a report.
    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),

    /// Dataset missing or unreadable.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable class name, used as the machine-readable error tag.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Framing(_) => "framing",
            Error::Degenerate(_) => "degenerate-input",
            Error::Contract(_) => "contract-violation",
            Error::Diverged(_) => "diverged",
            Error::Malformed { .. } => "malformed-file",
            Error::StageMismatch(_) => "stage-mismatch",
            Error::IncompleteGrid(_) => "incomplete-grid",
            Error::Dataset(_) => "dataset",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code for the CLI. 0 is success, 1 is reserved for
    /// generic panics, everything else maps one class to one code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Framing(_) => 3,
            Error::Degenerate(_) => 4,
            Error::Contract(_) => 5,
            Error::Diverged(_) => 6,
            Error::Malformed { .. } => 7,
            Error::StageMismatch(_) => 8,
            Error::IncompleteGrid(_) => 9,
            Error::Dataset(_) => 10,
            Error::Io(_) => 11,
            Error::Json(_) => 12,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_and_exit_codes_are_distinct() {
        let errs = [
            Error::Config(String::new()),
            Error::Framing(String::new()),
            Error::Degenerate(String::new()),
            Error::Contract(String::new()),
            Error::Diverged(String::new()),
            Error::Malformed {
                path: String::new(),
                reason: String::new(),
            },
            Error::StageMismatch(String::new()),
            Error::IncompleteGrid(String::new()),
            Error::Dataset(String::new()),
        ];
        let mut classes: Vec<&str> = errs.iter().map(|e| e.class()).collect();
        let mut codes: Vec<i32> = errs.iter().map(|e| e.exit_code()).collect();
        classes.sort_unstable();
        classes.dedup();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(classes.len(), errs.len());
        assert_eq!(codes.len(), errs.len());
    }
}
