//! Neural-network solvers for mean-field control problems.
//!
//! Controls and value functions are networks `(t, μ, x) ↦ R^d` that take the
//! law either as a histogram on a fixed grid or through an averaged latent of
//! the particles. They are trained by dynamic programming (global control,
//! policy iteration, actor/critic) or through the McKean-Vlasov adjoint BSDE
//! (local, multi-step and global schemes).

pub mod bsde_solvers;
pub mod dp_solvers;
pub mod dynamics;
pub mod error;
pub mod measure;
pub mod mfnn;
pub mod nnet;
pub mod problems;

pub use error::{Error, Result};
