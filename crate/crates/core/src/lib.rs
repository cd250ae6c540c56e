//! Affine-body contact dynamics with a consensus-ADMM domain decomposition.

pub mod balance;
pub mod body;
pub mod consensus;
pub mod error;
pub mod geometry;
pub mod scene;
pub mod solver;

pub use error::{Error, Result};
