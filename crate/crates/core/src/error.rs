use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no admissible sample split: {0}")]
    DegenerateSplit(String),
    #[error("split leaves an empty child")]
    EmptyChild,
    #[error("invalid bandwidth {0}")]
    InvalidBandwidth(f64),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("singular KKT system")]
    SingularSystem,
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),
    #[error("dimension too small: model needs p >= {needed}, got {got}")]
    DimensionTooSmall { needed: usize, got: usize },
    #[error("bootstrap resample degenerate after {0} redraws")]
    ResampleDegenerate(usize),
    #[error("pooled standard deviation is zero")]
    ZeroPooledSd,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable kind name used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::Parse(_) => "ParseError",
            Error::Schema(_) => "SchemaError",
            Error::Invariant(_) => "InvariantError",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::DegenerateSplit(_) => "DegenerateSplit",
            Error::EmptyChild => "EmptyChild",
            Error::InvalidBandwidth(_) => "InvalidBandwidth",
            Error::DegenerateData(_) => "DegenerateData",
            Error::SingularSystem => "SingularSystem",
            Error::DegenerateWeights(_) => "DegenerateWeights",
            Error::DimensionTooSmall { .. } => "DimensionTooSmall",
            Error::ResampleDegenerate(_) => "ResampleDegenerate",
            Error::ZeroPooledSd => "ZeroPooledSd",
            Error::Format(_) => "FormatError",
            Error::Io(_) => "IoError",
        }
    }

    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse(_)
                | Error::Schema(_)
                | Error::Invariant(_)
                | Error::InvalidParameter(_)
                | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
