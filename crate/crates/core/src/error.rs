use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("empty mesh")]
    EmptyMesh,

    #[error("unsupported element degree {0} (expected 1 or 2)")]
    UnsupportedDegree(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite: non-positive pivot at index {index}")]
    NotSpd { index: usize },

    #[error("non-finite coefficient value on element {element}")]
    NonFiniteCoefficient { element: usize },

    #[error("non-finite coefficient value for ensemble member {member}")]
    NonFiniteSample { member: usize },

    #[error("non-finite right-hand side for ensemble member {member}")]
    NonFiniteRhs { member: usize },

    #[error("time step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble member {member} has a non-positive diffusion coefficient (min {min})")]
    Infeasible { member: usize, min: f64 },

    #[error("stability condition violated: theta = {theta}, theta_plus = {theta_plus}")]
    StabilityViolation { theta: f64, theta_plus: f64, report: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
