use thiserror::Error;

/// Errors raised by the distribution, estimator, ambiguity-set and solver layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("pmf and grid/partner live on different grids")]
    GridMismatch,
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("invalid stratification: {0}")]
    InvalidStratification(String),
    #[error("stratum {stratum} has non-positive probability {mass}")]
    StratumZeroProbability { stratum: usize, mass: f64 },
    #[error("grid point {value} has no integer preimage under the binomial scaling")]
    NonIntegerPreimage { value: f64 },
    #[error("shifted Rayleigh density argument x - delta = {arg} is not positive")]
    NonPositiveDensityArgument { arg: f64 },
    #[error("empty sample batch")]
    EmptyBatch,
    #[error("stratum {0} has no samples")]
    EmptyStratum(usize),
    #[error("every stratum has zero omega*sigma product")]
    AllZeroProducts,
    #[error("evaluation pmf puts mass {mass} on grid index {index} where the reference has none")]
    SupportViolation { index: usize, mass: f64 },
    #[error("stratum {stratum} has budget {budget}, below the minimum")]
    ZeroBudgetStratum { stratum: usize, budget: f64 },
    #[error("projection did not converge after {sweeps} sweeps")]
    ProjectionDidNotConverge { sweeps: usize },
    #[error("projection is not defined for {0} sets")]
    UnsupportedProjection(&'static str),
    #[error("invalid ambiguity set: {0}")]
    InvalidAmbiguitySet(String),
    #[error("no ascent start produced a feasible result")]
    NoStartConverged,
    #[error("grid has {size} points; brute force supports at most {max}")]
    GridTooLarge { size: usize, max: usize },
    #[error("budget {budget} cannot give every one of {strata} strata at least {floor}")]
    InfeasibleBudget { budget: f64, strata: usize, floor: f64 },
    #[error("inner solver failed for every model: {0}")]
    InnerSolverFailure(String),
    #[error("GP fit failed: {0}")]
    GpFitFailure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
