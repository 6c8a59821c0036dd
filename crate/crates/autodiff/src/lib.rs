//! Reverse-mode automatic differentiation over eagerly evaluated graphs of
//! dense `f64` matrices.
//!
//! Backward passes are emitted as ordinary graph operations. Calling
//! [`Graph::grad`] with `create_graph = true` therefore yields gradient nodes
//! that can be differentiated again, which is what differentiating through an
//! inner gradient step requires.
//!
//! ```
//! use viable_autodiff::Graph;
//!
//! let mut g = Graph::new();
//! let x = g.variable(vec![3.0], 1, 1).unwrap();
//! let y = g.square(x).unwrap();
//! let dy = g.grad(y, &[x], true).unwrap().of(x);
//! let d2y = g.grad(dy, &[x], false).unwrap().of(x);
//! assert_eq!(g.scalar_value(dy), 6.0);
//! assert_eq!(g.scalar_value(d2y), 2.0);
//! ```

mod backward;
pub mod check;
mod error;
mod graph;
mod kernels;

pub use backward::GradientMap;
pub use error::{AutodiffError, Result};
pub use graph::{Graph, NodeRef, Primitive};

#[cfg(test)]
mod tests;
