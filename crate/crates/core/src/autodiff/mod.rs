//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built once from a closed set of operations and then
//! evaluated any number of times against [`Bindings`] that supply the
//! named leaves. [`Graph::backward`] returns one gradient array per
//! parameter leaf, zero-filled for leaves the output does not depend on.
//!
//! ```
//! use handprob::autodiff::{Array, Bindings, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.param("x", &[1]).unwrap();
//! let y = g.square(x).unwrap();
//! let xv = Array::scalar(3.0);
//! let b = Bindings::new().bind("x", &xv);
//! let vals = g.forward(&b).unwrap();
//! let grads = g.backward(&vals, y).unwrap();
//! assert_eq!(grads.get("x").unwrap().item(), 6.0);
//! ```

mod array;
mod check;
mod graph;
mod kernels;

pub use array::Array;
pub use check::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{Bindings, Gradients, Graph, NodeId, Unary, Values};
pub(crate) use kernels::rodrigues as rotation_matrix;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("leaf `{0}` is not bound")]
    Binding(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },
}
