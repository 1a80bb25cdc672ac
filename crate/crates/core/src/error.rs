use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("degenerate volatility at t={t}: sigma*sigma^T is singular")]
    DegenerateVolatility { t: f64 },

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),

    #[error("conjugate is unbounded: kappa1 = 0 with an unbounded effective domain")]
    UnboundedConjugate,

    #[error("invalid constraint set: {0}")]
    InvalidSet(String),

    #[error("consumption set contains no admissible point")]
    InfeasibleConsumption,

    #[error("portfolio set is empty")]
    InfeasiblePortfolio,

    #[error("entropic closed form inapplicable: {0}")]
    ClosedFormInapplicable(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("lattice: {0}")]
    InvalidLattice(String),

    #[error("generator is +infinity at step {step}, node {node}, z = {z:?}")]
    DomainViolation { step: usize, node: usize, z: Vec<f64> },

    #[error("numeric fault (NaN) at step {step}, node {node}")]
    NumericFault { step: usize, node: usize },

    #[error("grid refinement did not converge: Y0(N) = {coarse}, Y0(2N) = {fine}")]
    NonConvergence { coarse: f64, fine: f64 },

    #[error("branch reweighting out of [0,1]: |eta| sqrt(dt) = {value} >= 1, increase the number of steps")]
    StepTooCoarse { value: f64 },

    #[error("unsupported terminal functional: {0}")]
    UnsupportedFunctional(String),

    #[error("empty oracle grid: {0}")]
    EmptyGrid(String),

    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
