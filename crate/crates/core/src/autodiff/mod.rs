//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! ```
//! use zoneroute::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])?)?;
//! let x = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]])?)?;
//! let y = tape.matmul(w, x)?;
//! let loss = tape.sum(y)?;
//! let grads = tape.backward(loss)?;
//! // d(sum(W·x))/dW[i][j] = x[j]
//! assert_eq!(grads.get(w).data(), &[5.0, 6.0, 5.0, 6.0]);
//! # Ok::<(), zoneroute::Error>(())
//! ```

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, rel_error, GradCheckReport, FULL_CHECK_LIMIT, SAMPLE_SIZE};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, MASKED_LOG_PROB};
pub use tensor::Tensor;
