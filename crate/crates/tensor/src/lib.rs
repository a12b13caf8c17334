//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations as they execute and is consumed by
//! [`Tape::backward`]. Parameters live in a [`ParamStore`] that the tape
//! borrows; their gradients come back either as a [`Gradients`] map or added
//! straight into a [`GradBuffer`].
//!
//! [`Tape::detach`] is the gradient barrier: its output carries the same value
//! as its input but nothing flows back through it.
//!
//! ```
//! use moth_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let a = tape.input(Tensor::new(&[1, 1], vec![2.0]).unwrap(), true);
//! let b = tape.input(Tensor::new(&[1, 1], vec![3.0]).unwrap(), true);
//! let c = tape.matmul(a, b).unwrap();
//! let grads = tape.backward(c).unwrap();
//! assert_eq!(grads.of(a).unwrap(), &[3.0]);
//! assert_eq!(grads.of(b).unwrap(), &[2.0]);
//! ```

mod backward;
pub mod check;
mod error;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
