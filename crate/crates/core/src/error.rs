use std::path::PathBuf;

use crate::quantizer::CenterSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset is empty")]
    Empty,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at sample {sample}, observation {observation}, coordinate {coordinate}")]
    NonFinite {
        sample: usize,
        observation: usize,
        coordinate: usize,
    },

    #[error("invalid power r = {0}")]
    InvalidPower(f64),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("cannot compute the center of an empty cell")]
    EmptyCell,

    /// The solver ran out of iterations. The best iterate is attached.
    #[error(
        "center solver did not converge after {} iterations (gradient norm {:e})",
        .0.iterations,
        .0.gradient_norm
    )]
    NoConvergence(Box<CenterSolution>),

    #[error("requested {n} centers but the dataset has only {m} samples")]
    TooManyCenters { n: usize, m: usize },

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error("no known quantizer constant for dimension {0}")]
    UnknownConstant(usize),

    #[error("quadrature failed to reach tolerance (estimate {estimate:e}, error {error:e})")]
    QuadratureFailure { estimate: f64, error: f64 },

    #[error("invalid density model: {0}")]
    InvalidDensity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("partitions have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("column {column} has zero variance")]
    ZeroVariance { column: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: line {line} has {found} fields, expected {expected}")]
    RaggedRows {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by malformed input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Empty
                | Error::DimensionMismatch(_)
                | Error::NonFinite { .. }
                | Error::LengthMismatch { .. }
                | Error::InvalidPartition(_)
                | Error::ZeroVariance { .. }
                | Error::Parse { .. }
                | Error::RaggedRows { .. }
                | Error::Io(_)
                | Error::TooManyCenters { .. }
                | Error::InvalidDensity(_)
        )
    }
}
