//! Small dense reverse-mode differentiation engine.
//!
//! Arrays are `f64`, row-major, at most two dimensions in practice. A
//! [`Tape`] evaluates primitives eagerly and records them; calling
//! [`Tape::backward`] walks the records in reverse. The primitive set is
//! deliberately small (matmul, elementwise arithmetic with scalar/row/column
//! broadcasting, `tanh`, SiLU, `exp`, `log`, softplus, reductions and column
//! concatenation); everything else is composed from it.

mod array;
mod check;
mod error;
mod optim;
mod tape;

pub use array::{matmul, Array};
pub use check::gradcheck;
pub use error::{GradError, Result};
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimState, ParamSet};
pub use tape::{Gradients, Tape, Var};
