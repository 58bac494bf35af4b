use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library. Each variant corresponds to a
/// named error in the module contracts; the CLI maps them onto its exit-code
/// scheme via [`Error::exit_code`].
#[derive(Error, Debug)]
pub enum Error {
    #[error("dictionary dimension k = {k} exceeds the configured maximum {max}")]
    DimensionTooLarge { k: usize, max: usize },

    #[error("covariate row {row} lies outside the dictionary domain box (coordinate {coord} = {value})")]
    DomainViolation { row: usize, coord: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error(
        "weighted basis matrix is numerically rank deficient: rank {rank} < k = {k} \
         (smallest singular value {smallest:e}, tolerance {tolerance:e} relative)"
    )]
    SingularGram {
        rank: usize,
        k: usize,
        smallest: f64,
        tolerance: f64,
    },

    #[error("mixed-sign weights: a doubly robust functional requires S >= 0 or S <= 0 almost surely")]
    MixedSignWeights,

    #[error("instance too large for the brute-force engine: n = {n} (max 14), m = {m} (max 6)")]
    TooLargeForBruteForce { n: usize, m: usize },

    #[error("U-statistic order m = {0} exceeds the engine ceiling 8")]
    OrderTooHigh(usize),

    #[error("invalid argument: {0}")]
    ArgumentError(String),

    #[error("underdetermined problem: k = {k} >= n = {n}")]
    Underdetermined { k: usize, n: usize },

    #[error("empty data set")]
    EmptyData,

    #[error("degenerate scale: se[psi_1] must be positive")]
    DegenerateScale,

    #[error("unstable resampling: {rejected} of {attempted} bootstrap resamples rejected (> 50%)")]
    UnstableResampling { rejected: usize, attempted: usize },

    #[error("nuisance perturbation infeasible: clipping removed {lost_fraction:.2} of the perturbation mass")]
    PerturbationInfeasible { lost_fraction: f64 },

    #[error("nuisance fit violates boundedness: {0}")]
    NuisanceBounds(String),

    #[error("invalid configuration at {pointer}: {message}")]
    InvalidConfig { pointer: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code contract: 0 success, 2 validation error, 3 singular Gram.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularGram { .. } => 3,
            _ => 2,
        }
    }

    /// Machine-readable error kind used in the JSON error object on stderr.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionTooLarge { .. } => "DimensionTooLarge",
            Error::DomainViolation { .. } => "DomainViolation",
            Error::ShapeError(_) => "ShapeError",
            Error::SingularGram { .. } => "SingularGram",
            Error::MixedSignWeights => "MixedSignWeights",
            Error::TooLargeForBruteForce { .. } => "TooLargeForBruteForce",
            Error::OrderTooHigh(_) => "OrderTooHigh",
            Error::ArgumentError(_) => "ArgumentError",
            Error::Underdetermined { .. } => "Underdetermined",
            Error::EmptyData => "EmptyData",
            Error::DegenerateScale => "DegenerateScale",
            Error::UnstableResampling { .. } => "UnstableResampling",
            Error::PerturbationInfeasible { .. } => "PerturbationInfeasible",
            Error::NuisanceBounds(_) => "NuisanceBounds",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
