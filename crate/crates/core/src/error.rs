use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("polynomial degree {degree} exceeds the supported maximum of {max}")]
    UnsupportedDegree { degree: usize, max: usize },

    #[error("value {value} lies outside the support [{lower}, {upper}] of the input marginal")]
    Domain { value: f64, lower: f64, upper: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("multi-index set would hold {size} terms, above the cap of {cap}")]
    TooLarge { size: u128, cap: u128 },

    #[error(
        "least-squares system is rank deficient ({rows} samples for {cols} basis terms); use ridge > 0"
    )]
    RankDeficient { rows: usize, cols: usize },

    #[error("non-finite value encountered in {layer}")]
    NonFinite { layer: String },

    #[error("batch normalization in {layer} has no running statistics")]
    MissingRunningStats { layer: String },

    #[error("exact inference requires a model with batch normalization folded")]
    NotFolded,

    #[error("all {0} training restarts failed")]
    TrainingFailed(usize),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("checksum mismatch: header says {expected}, payload hashes to {found}")]
    Checksum { expected: String, found: String },

    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::UnsupportedDegree { .. }
            | Error::Domain { .. }
            | Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::TooLarge { .. } => "argument",
            Error::RankDeficient { .. } | Error::NonFinite { .. } | Error::Degenerate(_) => {
                "numeric"
            }
            Error::MissingRunningStats { .. } | Error::NotFolded => "model-state",
            Error::TrainingFailed(_) => "training",
            Error::Version { .. }
            | Error::Malformed(_)
            | Error::Checksum { .. }
            | Error::RaggedRow { .. }
            | Error::Json(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
