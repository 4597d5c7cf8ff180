//! Dense row-major `f64` tensors with a reverse-mode autodiff tape.
//!
//! ```
//! use vkd_tensor::{ops, Tensor};
//!
//! let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().requires_grad();
//! let x = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
//! let loss = ops::sum_all(&ops::matmul(&x, &w).unwrap());
//! loss.backward().unwrap();
//! assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, -1.0, -1.0]);
//! ```

mod error;
pub mod exec;
mod gradcheck;
pub mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::{grad_enabled, no_grad, numel, strides, Tensor};
