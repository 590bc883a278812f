//! Dense tensors with define-by-run reverse-mode differentiation.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod init;
mod params;
mod real;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use error::{DiffError, Result};
pub use gradcheck::{Differentiable, GradCheck, GradReport};
pub use init::SeedFan;
pub use params::{Bound, Param, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Tape, Var, MIN_NORM};
pub use tensor::Tensor;
