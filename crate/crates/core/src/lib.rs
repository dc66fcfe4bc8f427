//! Sparse recovery on the torus: the scalar BLASSO, spike/kernel demixing and the group
//! BLASSO, with minimal-norm dual certificates, non-degeneracy checks and recovery sweeps.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atoms;
pub mod certificate;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod qp;
pub mod scan;
pub mod solver;
pub mod torus;

pub use atoms::{Atom, Family, ProblemInstance, Sign, SparseSignal, Term};
pub use error::{Error, Result};
pub use kernel::KernelBank;
pub use torus::{torus_dist, TorusPoint};
