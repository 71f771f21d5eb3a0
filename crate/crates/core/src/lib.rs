//! Conditional adversarial synthesis of filamentary-structured images.
//!
//! A generator maps a binary segmentation map plus a noise code to an RGB
//! phantom; a discriminator judges (image, segmentation) pairs. The style
//! variant replaces the L1 deviation term with Gram-matrix style, feature
//! content and total-variation losses computed on a frozen feature network.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod losses;
pub mod micro;
pub mod nets;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
