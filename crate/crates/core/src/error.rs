use thiserror::Error;

/// Errors raised by the contract-design pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} is not positive semidefinite (smallest eigenvalue {min_eig:e})")]
    NotPsd { what: &'static str, min_eig: f64 },

    #[error("invalid `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("discounted series diverges (gamma * rho(A_cl)^2 = {0})")]
    Divergent(f64),

    #[error("agent cost gap J1 - J0 = {0} is not positive")]
    NonpositiveGap(f64),

    #[error("covariance factorization failed: {0}")]
    SingularCovariance(&'static str),

    #[error("symmetric eigendecomposition failed")]
    EigenFailure,

    #[error("horizon mismatch ({0} vs {1})")]
    HorizonMismatch(usize, usize),

    #[error("quadrature error estimate {estimate:e} above tolerance {tolerance:e}")]
    QuadratureFailure { tolerance: f64, estimate: f64 },

    #[error("inverse utility undefined at {0}")]
    UtilityDomain(f64),

    #[error("beta - alpha = {0:e} is below the separation tolerance")]
    DegenerateSeparation(f64),

    #[error("no feasible threshold at horizon T = {0}")]
    NoFeasibleThreshold(usize),

    #[error("no feasible contract for any horizon 1..={0}")]
    NoFeasibleContract(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors meaning "no contract exists", as opposed to bad input or
    /// numerical trouble.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::NoFeasibleContract(_)
                | Error::NoFeasibleThreshold(_)
                | Error::DegenerateSeparation(_)
                | Error::UtilityDomain(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
