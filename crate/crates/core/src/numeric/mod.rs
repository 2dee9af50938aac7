//! Dense tensors, reverse-mode differentiation and the small amount of
//! linear algebra the model needs.

pub mod gradcheck;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{AttentionLayout, Tape, Var};
pub use tensor::Tensor;
