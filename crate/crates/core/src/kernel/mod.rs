//! Minimal deterministic differentiable-computation substrate.

mod gradcheck;
mod network;
pub mod ops;
mod params;
pub mod persist;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, NetworkObjective, Objective, ParamCheck};
pub use network::{Layer, Sequential, Trace};
pub use ops::{
    causal_mask, causal_taps, conv2d_backward, conv2d_forward, dense_backward, dense_forward,
    masked_conv2d_forward, softmax, Activation, ConvGeometry, MaskKind,
};
pub use params::{AdamConfig, Grads, ParamStore};
pub use tensor::{Scalar, Tensor};
