use thiserror::Error;

use crate::atoms::Family;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("atom variant `{variant}` is not an extreme point of the {family} family")]
    FamilyMismatch { family: Family, variant: &'static str },

    #[error("{atoms} atoms cannot be independent in R^{measurements}")]
    TooManyAtoms { atoms: usize, measurements: usize },

    #[error("kernel validation failed: kernel {kernel} order {order} has relative error {error:.3e} (tolerance {tol:.1e})")]
    FailsValidation { kernel: usize, order: u8, error: f64, tol: f64 },

    #[error("invalid kernel bank: {0}")]
    InvalidKernel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("source condition fails: no dual vector interpolates the support ({0})")]
    Infeasible(String),

    #[error("dual feasibility margin {margin:.9} still above 1 after {refinements} grid refinements")]
    GridInsufficient { margin: f64, refinements: usize },

    #[error("curve directions are antipodal: |a_t| = {0:.3e}")]
    DegenerateDirections(f64),

    #[error("ground truth is not certified: {0}")]
    NotCertified(String),

    #[error("solver failed: {0}")]
    SolverFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
