#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod datagen;
pub mod dsp;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod recording;
pub mod training;

pub use error::{Error, Result};
