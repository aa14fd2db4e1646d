//! Self-contained numeric foundation: dense tensors, a reverse-mode tape,
//! finite-difference gradient checking, and the small dense linear algebra
//! the evaluation metrics need. Everything is deterministic given fixed
//! inputs — reductions run in a fixed order, so repeated runs are
//! bit-identical on the same target.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use kernels::ConvGeom;
pub use linalg::{matrix_sqrt_psd, sym_eig};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax, Param, Tensor};
