//! Attention-conditioned CNN regression of field-emitter tip geometry
//! (width, height, apex radius) from grayscale micrographs.

pub mod augment;
pub mod classical;
pub mod dataio;
pub mod error;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SimicError};
pub use tensor::{Tape, Tensor, Var};
