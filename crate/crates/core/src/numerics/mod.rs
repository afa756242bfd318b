//! Dense tensors, a reverse-mode tape, AdamW, and a finite-difference oracle.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use optim::{AdamConfig, AdamW};
pub use params::{Bindings, Parameters};
pub use tape::{sigmoid, softplus, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
