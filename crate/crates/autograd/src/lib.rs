//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! ```
//! use cdkd_autograd::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
//! let loss = x.mul(&x).unwrap().mean().unwrap();
//! loss.backprop().unwrap();
//! assert_eq!(x.grad(), vec![1.0, 2.0]);
//! ```

mod error;
pub mod gradcheck;
mod kernels;
mod ops;
mod tape;

pub use error::{AutogradError, Result};
pub use gradcheck::{analytic_gradient, finite_diff_check, numeric_gradient};
pub use kernels::avg_pool;
pub use tape::{DiffTensor, NodeId, Tape};
