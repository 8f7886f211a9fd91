//! Two-dimensional linear elasticity with the Tresca friction law, solved as
//! a variational inequality, plus the shape-gradient machinery needed to run
//! volume-constrained shape optimization on top of it.
//!
//! The crate is organized around six layers:
//! - [`mesh`]: triangulations with tagged boundaries, boundary frames,
//!   curvature, deformation;
//! - [`fem`]: P1 assembly, constrained conjugate-gradient solves, traction
//!   recovery, boundary calculus;
//! - [`tresca`]: the friction problem itself (iterative switching solver,
//!   energy, contact classification, a proximal-gradient oracle);
//! - [`shape`]: shape gradients of the friction energy in volume and boundary
//!   form, descent directions, material/shape derivatives of the solution;
//! - [`optim`]: the volume-constrained descent loop with Uzawa multiplier
//!   updates;
//! - [`expr`], [`config`], [`out`], [`cli`]: the expression language, run
//!   configuration, file outputs and the command-line driver.

pub mod cli;
pub mod config;
pub mod delaunay;
pub mod expr;
pub mod fem;
pub mod math2d;
pub mod mesh;
pub mod optim;
pub mod out;
pub mod shape;
pub mod tresca;
