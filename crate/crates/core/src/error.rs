use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("observable {index} is not Hermitian (residual {residual:.3e})")]
    NonHermitian { index: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("observables together with the identity are linearly dependent (Gram ratio {ratio:.3e})")]
    DegenerateObservables { ratio: f64 },
    #[error("observables do not commute (commutator norm {norm:.3e})")]
    NonCommuting { norm: f64 },
    #[error("dimension {dim} exceeds the dense cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("numerical overflow in {0}")]
    Overflow(String),
    #[error("thermal state is rank deficient: eigenvalue {value:.3e} below floor at index {index}")]
    RankDeficient { index: usize, value: f64 },
    #[error("spectra carry different basis labels")]
    BasisMismatch,
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64, best: Vec<f64> },
    #[error("target expectation values lie outside the spectral hull (component {component})")]
    OutOfRange { component: usize },
    #[error("heat targets push expectations outside the spectral hull (component {component})")]
    HullViolation { component: usize },
    #[error("converged cold inverse temperature {beta_lambda:.6e} has the opposite sign of {beta0:.6e}")]
    SignViolation { beta0: f64, beta_lambda: f64 },
    #[error("asymptotic Fisher density is singular (min/trace {ratio:.3e})")]
    SingularG { ratio: f64 },
    #[error("cold inverse temperature must be positive, got {0}")]
    ZeroColdTemperature(f64),
    #[error("scale too large for the chosen representation: {0}")]
    ScaleTooLarge(String),
    #[error("no closed form available for {0}")]
    NoClosedForm(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
