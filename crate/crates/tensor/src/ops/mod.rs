//! Differentiable operations. Every op validates shapes up front and
//! returns [`TensorError::Dimension`](crate::TensorError) on mismatch.

mod elementwise;
mod image;
mod layout;
mod matmul;
mod nn;
mod reduce;

pub use elementwise::{
    abs, add, add_scalar, add_trailing, clamp, div, exp, gelu, ln, mul, mul_const,
    mul_leading, mul_scalar_tensor, mul_trailing, neg, recip, scale, sqrt, square, sub,
};
pub use image::{conv2d, im2col, patchify, pixel_shuffle, pixel_unshuffle, unpatchify};
pub use layout::{concat, embedding, gather_map, narrow, permute, pick_last, reshape, transpose, ZERO_SLOT};
pub use matmul::matmul;
pub use nn::{layer_norm, log_softmax, scaled_dot_product_attention, softmax, AttnMask};
pub use reduce::{max_axis, mean_all, mean_axis, sum_all, sum_axis};
