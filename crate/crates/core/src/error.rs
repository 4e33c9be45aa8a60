use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("generator is not irreducible: state {from} cannot reach state {to}")]
    NotIrreducible { from: usize, to: usize },

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("trajectory left the declared region at t = {t}: distance {distance:e}")]
    LeftRegion { t: f64, distance: f64 },

    #[error("adaptive integrator step underflow at t = {t} (h = {h:e})")]
    StepFailure { t: f64, h: f64 },

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("horizon too short for {batches} batches")]
    DegenerateBatches { batches: usize },

    #[error("degenerate state: {0}")]
    Degenerate(String),

    #[error("averaged field vanishes strictly between {x} and the equilibrium (at y = {y})")]
    SingularInterior { x: f64, y: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
