//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar sweeps the record in reverse once and
//! leaves gradients on the leaves created with [`Graph::param`]. Trainable
//! weights live in a [`ParamStore`] and are placed on a fresh graph each
//! step with [`ParamStore::bind`].
//!
//! ```
//! use autodiff::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.param(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.square().sum();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutodiffError, Result};
pub use graph::{sigmoid, softplus, CustomBackward, CustomOp, Graph, NodeId, Unary, Var};
pub use params::{Bound, Gradients, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::{numel, Tensor};
