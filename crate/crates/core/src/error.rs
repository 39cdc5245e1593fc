use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("linear solver did not converge (relative residual {residual:.3e})")]
    SolverFailure { residual: f64 },
    #[error("right-hand side is not in the operator range (relative residual {residual:.3e})")]
    InfeasibleRhs { residual: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("unsupported exponent p = {0}")]
    UnsupportedP(f64),
    #[error("width-reduction budget exceeded after {steps} width steps")]
    WidthBudgetExceeded { steps: usize },
    #[error("degenerate gradient, decision problem has no feasible point")]
    DegenerateGradient,
    #[error("untouched edges contain a cycle (instance is not cycle-touching)")]
    CycleTouchingViolation,
    #[error("objective is unbounded along an untouched cycle")]
    Unbounded,
    #[error("oracle failure: {0}")]
    OracleFailure(String),
    #[error("plugin failure: {0}")]
    Plugin(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

pub(crate) fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}
