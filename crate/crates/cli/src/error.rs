use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invariant failure: {0}")]
    Invariant(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

impl From<fbe_core::Error> for CliError {
    fn from(e: fbe_core::Error) -> Self {
        CliError::Numerical(e.to_string())
    }
}

/// Stable short code for a library error, written into failed rows.
pub fn error_code(e: &fbe_core::Error) -> &'static str {
    use fbe_core::Error::*;
    match e {
        NonHermitian { .. } => "non_hermitian",
        DimensionMismatch(_) => "dimension_mismatch",
        DegenerateObservables { .. } => "degenerate_observables",
        NonCommuting { .. } => "non_commuting",
        DimensionCap { .. } => "dimension_cap",
        Overflow(_) => "overflow",
        RankDeficient { .. } => "rank_deficient",
        BasisMismatch => "basis_mismatch",
        NoConvergence { .. } => "no_convergence",
        OutOfRange { .. } => "out_of_range",
        HullViolation { .. } => "hull_violation",
        SignViolation { .. } => "sign_violation",
        SingularG { .. } => "singular_g",
        ZeroColdTemperature(_) => "zero_cold_temperature",
        ScaleTooLarge(_) => "scale_too_large",
        NoClosedForm(_) => "no_closed_form",
        InvalidParameter(_) => "invalid_parameter",
    }
}
