//! Minimal reverse-mode automatic differentiation over (B, C, H, W) arrays.

pub mod checkpoint;
pub mod fd;
mod graph;
mod kernels;
pub mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{he_uniform, ParamSet, Parameter};
pub use tensor::{Real, Shape, Tensor};
