//! Dense tensors, differentiable operations and gradient checking.

mod gradcheck;
pub mod ltf;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, Coords, GradCheckReport};
pub use ops::{clip_residuals, reflect_index, ClippedResiduals, ConvMode, LAYER_NORM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
