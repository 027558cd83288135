use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{field}: {message}")]
    InvalidInput { field: String, message: String },

    #[error("integration diverged near t = {t}")]
    Divergence { t: f64 },

    #[error("transition matrix is ill-conditioned at t = {t} (condition number {condition:.3e})")]
    IllConditioned { t: f64, condition: f64 },

    #[error("paths are sampled on different grids")]
    GridMismatch,

    #[error("lattice has {size} points, above the cap of {cap}")]
    LatticeTooLarge { size: u128, cap: u128 },

    #[error("no equilibrium found")]
    NoEquilibrium,

    #[error("{0}")]
    NotConverged(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidInput {
            field: field.into(),
            message: message.into(),
        }
    }
}
