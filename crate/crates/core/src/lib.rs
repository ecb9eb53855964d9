//! Discretized Hessian-dependent variational integrals `∫ F(D²u)`:
//! clamped-boundary critical points, double-divergence residuals, and the
//! oscillation diagnostics (BMO modulus, Campanato decay, reverse Hölder
//! constants, singular-set detection) used to study their regularity.
//!
//! The area integrand `√det(I + (D²u)²)` of Lagrangian gradient graphs is the
//! flagship model; see [`hamstat`].

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod energy;
pub mod error;
pub mod grid;
pub mod hamstat;
pub mod io;
pub mod linalg;
pub mod par;
pub mod report;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{
    ball_family, difference_quotient, hessian_field, integrate, make_grid, Ball, BallFamily, GridGeometry,
    NodeKind, Region, ScalarGrid, SymMatField, TestFunctionSet,
};
pub use linalg::{SymMat, Tensor4};
