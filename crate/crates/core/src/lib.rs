//! Retinal OCT disease classification.
//!
//! The crate covers the whole offline pipeline: dataset ingestion and
//! splitting ([`data`]), CutMix/MixUp batch augmentation ([`augment`]), a
//! small CPU convolutional network engine ([`nn`]) with the Xception-style,
//! InceptionV3-style and tiny reference architectures ([`models`]), training
//! with early stopping ([`train`]), evaluation reports ([`metrics`]) and the
//! Grad-CAM, LIME and occlusion-sensitivity explainers ([`xai`]).

pub mod augment;
pub mod classes;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod plot;
pub mod synthetic;
pub mod train;
pub mod xai;

pub use classes::{ClassLabel, NUM_CLASSES};
pub use error::{Error, Result};

/// Side length of every network input.
pub const IMAGE_SIZE: usize = 224;
/// Colour channels of every network input.
pub const CHANNELS: usize = 3;
/// Number of floats in one preprocessed image.
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
