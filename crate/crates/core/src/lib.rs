//! Engine for training and evaluating MonoUNet, an ultra-compact U-Net with a
//! trainable monogenic (local-phase) feature block, on 2D ultrasound-like images.
//!
//! The crate is self-contained: it ships its own dense-tensor reverse-mode
//! autodiff engine ([`autodiff`]), the multi-scale log-Gabor phase extractor
//! ([`monogenic`]), the network topology and its ablation variants
//! ([`network`]), a training loop ([`training`]), segmentation metrics
//! ([`metrics`]), agreement statistics ([`clinstats`]), and a synthetic
//! ultrasound phantom generator ([`phantom`]) used for desk-scale verification.

pub mod autodiff;
pub mod clinstats;
pub mod error;
pub mod metrics;
pub mod monogenic;
pub mod network;
pub mod pgm;
pub mod phantom;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Re-exported RNG types so downstream binaries share the exact generator.
pub mod rng {
    pub use rand::SeedableRng;
    pub use rand_chacha::ChaCha12Rng;
}
