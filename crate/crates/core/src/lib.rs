//! Trainable coarse-grid PDE solving: a learnable symmetric derivative
//! filter and spectral correction networks wrapped around an RK4 march,
//! differentiable end to end through a small reverse-mode tape.
//!
//! `model` assembles the solver, `train` fits it autoregressively on
//! low-resolution trajectories from `datagen`, and `metrics` scores the
//! rollouts. Everything runs in f64 by default with f32 behind the same
//! generic interface.

pub mod correction;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod integrator;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pde;
pub mod poisson;
pub mod stencil;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
