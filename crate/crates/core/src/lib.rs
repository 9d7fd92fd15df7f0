//! Speaker verification toolkit.
//!
//! A wav2vec-style encoder with layer truncation, a TDNN + statistics
//! pooling + maxout embedding head trained with additive angular margin
//! softmax, online augmentation, and a scoring back-end with cosine
//! similarity, adaptive s-norm, channel normalization and EER/minDCF.

pub mod archive;
pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
