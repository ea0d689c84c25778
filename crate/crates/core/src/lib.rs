//! Differentiable Lagrangian precipitation nowcasting.

pub mod advection;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod field;
pub mod flow;
pub mod gradcheck;
pub mod nets;
pub mod pipeline;
pub mod stack;
pub mod synthetic;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
