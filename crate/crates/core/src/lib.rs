//! Multi-time inquiries DETR: parallel inquiry-head decoder layers, U-like
//! encoder/decoder feature interaction, and a miniature set-prediction
//! detector to train and probe them.

pub mod attention;
pub mod checkpoint;
pub mod decoder;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
