use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("site {site} out of range for {n_spins} spins")]
    SiteOutOfRange { site: usize, n_spins: usize },

    #[error("spin count {0} outside supported range 1..=10")]
    SpinCount(usize),

    #[error("Hilbert space dimension {0} exceeds 1024")]
    DimensionTooLarge(usize),

    #[error("operator is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid coupling matrix: {0}")]
    InvalidCouplings(String),

    #[error("pulse schedule overlap: {0}")]
    ScheduleOverlap(String),

    #[error("schedule incompatible with time step: {0}")]
    ScheduleTiming(String),

    #[error("finite-width pulses are not supported here: {0}")]
    FiniteWidthUnsupported(String),

    #[error("empty distribution")]
    EmptyDistribution,

    #[error("non-uniform time grid")]
    NonUniformGrid,

    #[error("no dominant spectral peak")]
    NoDominantPeak,

    #[error("no decay within window")]
    NoDecay,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "INVALID_PARAMETER",
            Error::SiteOutOfRange { .. } => "SITE_OUT_OF_RANGE",
            Error::SpinCount(_) => "SPIN_COUNT",
            Error::DimensionTooLarge(_) => "DIM_TOO_LARGE",
            Error::NotHermitian(_) => "NOT_HERMITIAN",
            Error::DimensionMismatch(_) => "DIM_MISMATCH",
            Error::InvalidCouplings(_) => "INVALID_COUPLINGS",
            Error::ScheduleOverlap(_) => "SCHEDULE_OVERLAP",
            Error::ScheduleTiming(_) => "SCHEDULE_TIMING",
            Error::FiniteWidthUnsupported(_) => "FINITE_WIDTH_UNSUPPORTED",
            Error::EmptyDistribution => "EMPTY_DISTRIBUTION",
            Error::NonUniformGrid => "NON_UNIFORM_GRID",
            Error::NoDominantPeak => "NO_DOMINANT_PEAK",
            Error::NoDecay => "NO_DECAY",
            Error::Parse { .. } => "PARSE",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
