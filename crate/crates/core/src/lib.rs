//! Numerical laboratory for the defocusing quintic NLS and its derivation
//! from three-body quantum dynamics.
//!
//! Modules, bottom up:
//!
//! - [`grid`]: periodic grids, unitary FFTs and spectral multipliers.
//! - [`nls`]: Strang split-step solver for the cubic-quintic NLS.
//! - [`nbody`]: exact few-particle evolution and reduced density matrices.
//! - [`kernels`]: separable kernels, contraction operators and Duhamel checks.
//! - [`board`]: combinatorics of time-integral reorderings.
//! - [`bounds`]: numerical probes of multilinear estimates.
//! - [`harness`]: experiment configuration and reports behind the CLI.

pub mod board;
pub mod bounds;
pub mod error;
pub mod grid;
pub mod harness;
pub mod kernels;
pub mod nbody;
pub mod nls;

pub use error::{Error, Result};

pub type C64 = num_complex::Complex64;
