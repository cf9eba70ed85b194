//! Dense tensors, the differentiable primitives the network is built from,
//! and the finite-difference gradient checker.

mod attention;
mod conv;
mod gradcheck;
mod graph;
mod layout;
mod nn;
mod real;
mod tensor;

pub use attention::{relative_position_index, window_attention, AttentionSpec};
pub use conv::{bilinear_sample, conv2d, deform_conv2d, ConvGeometry};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layout::{
    channel_slice_table, crop_table, pixel_shuffle, pixel_shuffle_table, reflect_pad_table, window_merge,
    window_partition, Gather, ShuffleDirection, WindowLayout,
};
pub use nn::{gelu, gelu_scalar, layer_norm, linear, softmax, LAYER_NORM_EPS};
pub use real::{gemm, MatMut, MatRef, Real};
pub use tensor::Tensor;
