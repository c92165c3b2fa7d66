//! Minimal CPU network engine and the dual-head model built on it.

mod backbone;
mod layers;
mod model;
mod tensor;

pub(crate) use backbone::Builder;
pub use backbone::{Activation, BackboneSpec, BlockSpec, StemSpec, Variant};
pub use layers::{Cache, Conv, Node};
pub use model::{
    build_model, count_params_for, load_model, patch_tensor, save_model, softmax2, spoof_probability, Component,
    DualHeadConfig, DualHeadModel, HeadTask, ModelOutput, ParamCounts, SingleHeadModel, SPOOF_CLASS,
};
pub use tensor::Tensor;
