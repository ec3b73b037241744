//! Learnable spectral-kernel attention: random-feature maps, linear-time
//! kernelized attention, variance analysis and a small trainable encoder.

// Guards such as `!(x > 0.0)` are negated on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod error;
pub mod experiments;
pub mod featmap;
pub mod model;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
