//! Ensemble time stepping for groups of 2D linear parabolic problems
//! `u_t - div(a_j grad u) = f_j` on a rectangle, where every member of the
//! group shares one sparse factorization per time step, plus an ensemble
//! Monte Carlo driver for random diffusion coefficients.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`)
//! through [`Real`]; the aliases below fix it to `f64`.

pub mod ensemble;
pub mod error;
pub mod fem;
pub mod field;
pub mod harness;
pub mod mesh;
pub mod quadrature;
pub mod scalar;
pub mod sparse;
pub mod stability;
pub mod stochastic;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Point = mesh::Point2<f64>;
pub type Mesh = mesh::Mesh<f64>;
pub type FeSpace = fem::FeSpace<f64>;
pub type CsrMatrix = sparse::CsrMatrix<f64>;
pub type Block = sparse::Block<f64>;
pub type SpdFactorization = sparse::SpdFactorization<f64>;
pub type ScalarField = field::ScalarField<f64>;
pub type TimeGrid = ensemble::TimeGrid<f64>;
pub type EnsembleMember = ensemble::EnsembleMember<f64>;
pub type EnsembleProblem = ensemble::EnsembleProblem<f64>;
pub type EnsembleState = ensemble::EnsembleState<f64>;
pub type EmcResult = stochastic::EmcResult<f64>;
