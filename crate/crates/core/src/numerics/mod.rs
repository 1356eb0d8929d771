//! Small dense linear algebra, covariance hygiene and reverse-mode
//! differentiation.

mod cov;
mod mat;
mod tape;

pub use cov::{
    check_cov, cholesky, min_eigenvalue, solve_spd, symmetrize_psd, CovMat, JITTER_LADDER,
};
pub use mat::Mat;
pub use tape::{grad_check, Gradients, Tape, Var, VjpFn};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix `{0}` is singular after maximum jitter")]
    Singular(String),
    #[error("expected a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("matrix `{0}` has non-finite entries")]
    NonFinite(String),
    #[error("matrix `{name}` is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { name: String, asymmetry: f64 },
    #[error("matrix `{name}` is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { name: String, min_eigenvalue: f64 },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
