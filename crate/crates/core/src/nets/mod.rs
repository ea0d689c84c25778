//! U-Net building block and the nowcasting model assemblies.

mod models;
mod unet;

pub use models::{
    lupin_step_graph, predict_motion_graph, rainnet_step_graph, residual_step_graph, Model,
    ModelConfig, ModelKind, Normalization, StepOutput, StepVars, LEADS, WINDOW,
};
pub use unet::UNetConfig;
