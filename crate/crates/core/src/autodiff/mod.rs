//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records operations in topological order. Each builder method
//! checks operand shapes before the node is added, [`Graph::forward`]
//! evaluates every node and fails on the first non-finite value, and
//! [`Graph::backward`] accumulates parameter gradients in reverse order.
//!
//! ```
//! use fpo_lab::autodiff::{Array, Graph, ParamSet};
//!
//! let mut params = ParamSet::new();
//! let x = params.add("x", Array::scalar(3.0_f64));
//! let mut g = Graph::new();
//! let xn = g.param(&params, x);
//! let y = g.square(xn).unwrap();
//! let values = g.forward(&params, &[]).unwrap();
//! let grads = g.backward(&values, y, &params).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

mod array;
mod gradcheck;
mod graph;

pub use array::{Array, Scalar};
pub use gradcheck::{check_array_fn, compare, finite_difference, grad_check, GradCheckReport};
pub use graph::{top_k_indices, Gradients, Graph, Inputs, NodeId, ParamId, ParamSet, Values};

pub(crate) use graph::{log_sigmoid, log_softmax_in_place, softmax_in_place};
