use thiserror::Error;

use crate::lattice::MultiIndex;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("overflow: {0}")]
    Overflow(String),

    /// `h` is the second spatial index (equal to `j` for single-index divisors).
    #[error("small divisor at ℓ={ell} j={j} h={h}: |divisor| = {value:e} below floor {floor:e}")]
    SmallDivisor {
        ell: MultiIndex,
        j: i64,
        h: i64,
        value: f64,
        floor: f64,
    },

    #[error("aliasing energy {energy:e} (relative {relative:e}) exceeds tolerance {tol:e}")]
    Aliasing { energy: f64, relative: f64, tol: f64 },

    #[error("fixed point map is not a contraction: {0}")]
    NonContraction(String),

    #[error("series diverged after {terms} terms (last term norm {last:e})")]
    Divergence { terms: usize, last: f64 },

    #[error("argument norm {norm:e} outside convergence radius {radius:e}")]
    Radius { norm: f64, radius: f64 },

    #[error("conjugation check failed: {0}")]
    Conjugation(String),

    #[error("stagnation: {0}")]
    Stagnation(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
