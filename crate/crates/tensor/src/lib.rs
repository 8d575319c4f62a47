//! Dense tensors and a reverse-mode differentiation tape, sized for training
//! small convolutional networks on a CPU.
//!
//! ```
//! use sftn_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_f64(vec![1], &[3.0]).unwrap().with_requires_grad(true));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x), Some(&[6.0][..]));
//! ```

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{BatchNormOpts, Conv2dOpts, ConvTranspose2dOpts, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
