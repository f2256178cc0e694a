//! Numerical laboratory for homogenization of nonlocal space-time evolution
//! equations.
//!
//! The scaled problem is solved by explicit marching on self-similar lattices
//! (spacing `h = ε/N_z`, step `τ = ε²/N_t`), so that the corrector cell problems
//! on the unit torus use exactly the stencil seen by the solver at every `ε`.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cell;
pub mod effective;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod lattice;
pub mod limit;
pub mod media;
pub mod nonlocal;
pub mod quadrature;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Kernel = kernel::Kernel<f64>;
pub type KernelMoments = kernel::KernelMoments<f64>;
pub type MediumField = media::MediumField<f64>;
pub type Stencil = lattice::Stencil<f64>;
pub type SpaceTimeGrid = nonlocal::SpaceTimeGrid<f64>;
pub type Trajectory = nonlocal::Trajectory<f64>;
pub type CorrectorField = cell::CorrectorField<f64>;
pub type EffectiveCoefficients = effective::EffectiveCoefficients<f64>;
pub type LocalSolution = limit::LocalSolution<f64>;
