//! Dense and convolutional tensor math with reverse-mode gradients.

mod adam;
mod tape;
mod tensor;

pub use adam::Adam;
pub use tape::{
    gaussian_similarity, same_padding, softmax_rows, BatchNormMode, BatchStats, Gradients, Tape, Var, BN_EPS,
};
pub use tensor::Tensor;
