//! Numerical core for temporal context aggregation in video retrieval.
//!
//! Frame descriptors are pooled from convolutional feature maps, refined by a
//! single self-attention layer, trained contrastively against a memory bank of
//! negatives, and compared with cosine or chamfer similarity. Everything here
//! is `no_std` + `alloc`; file formats and the CLI live in the `tca` crate.
#![no_std]

extern crate alloc;

pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod retrieval;
pub mod sequence;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use sequence::FrameDescriptorSequence;
