use thiserror::Error;

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("property violation: {0}")]
    Violation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Violation(_) => 4,
        }
    }
}

impl From<pnorm::Error> for CliError {
    fn from(e: pnorm::Error) -> Self {
        use pnorm::Error as E;
        match e {
            E::InvalidInput(_)
            | E::DimensionMismatch { .. }
            | E::UnsupportedP(_)
            | E::Infeasible(_)
            | E::InfeasibleRhs { .. }
            | E::Unbounded
            | E::CycleTouchingViolation => CliError::Invalid(e.to_string()),
            E::SolverFailure { .. } | E::WidthBudgetExceeded { .. } | E::DegenerateGradient | E::OracleFailure(_) | E::Plugin(_) => {
                CliError::Solver(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Invalid(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Invalid(format!("csv: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
