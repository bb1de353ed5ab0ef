use thiserror::Error;

/// Errors raised by the localization library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular covariance (smallest eigenvalue {min_eig:.3e})")]
    SingularCovariance { min_eig: f64 },
    #[error("quadrature unavailable in dimension {dim} (max {max})")]
    QuadratureDimensionTooHigh { dim: usize, max: usize },
    #[error("density is not normalizable (mass {0:.3e})")]
    NonNormalizable(f64),
    #[error("moment strategy mismatch: {0}")]
    StrategyMismatch(String),
    #[error("covariance floor breached: smallest eigenvalue {min:.3e} vs largest {max:.3e}")]
    CovarianceFloorBreach { min: f64, max: f64 },
    #[error("tilt exponent overflow")]
    QuadratureOverflow,
    #[error("degenerate particle cloud: effective sample size {n_eff:.1} below {min:.1}")]
    DegenerateCloud { n_eff: f64, min: f64 },
    #[error("insufficient runs: got {got}, need at least {need}")]
    InsufficientRuns { got: usize, need: usize },
    #[error("input is not isotropic (deviation {0:.3e})")]
    AnisotropicInput(f64),
    #[error("tensor estimation failed: {0}")]
    TensorEstimationFailure(String),
    #[error("moment tensor is rank deficient (degenerate measure)")]
    RankDeficiency,
    #[error("sample budget too small: CI half-width {ci:.3e} exceeds tolerance {tol:.3e}")]
    SampleBudgetTooSmall { ci: f64, tol: f64 },
    #[error("test set is not centered: initial mass {0:.4}")]
    MiscenteredSet(f64),
    #[error("Richardson extrapolation unstable: {0}")]
    ExtrapolationUnstable(String),
    #[error("set mass {0:.4} exceeds one half")]
    MassTooLarge(f64),
    #[error("test set has zero mass")]
    EmptySet,
    #[error("lambda {0} outside (0, 1/2)")]
    LambdaOutOfRange(f64),
    #[error("conditioning event is empty")]
    ConditioningEventEmpty,
    #[error("all runs excluded by the event caps")]
    AllRunsExcluded,
    #[error("grid computation unavailable in dimension {dim} (max {max})")]
    GridDimensionTooHigh { dim: usize, max: usize },
    #[error("inconsistent time points: {0} vs {1}")]
    InconsistentTime(f64, f64),
    #[error("no exact sampler for this density")]
    NoSampler,
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
