//! Transferable adversarial subspaces around images: simplicial complexes
//! grown by momentum-gradient initialization, patch-shuffle augmentation,
//! and Monte-Carlo vertex refinement with a log-volume regularizer, plus a
//! small differentiable image encoder and a transfer-evaluation harness.

pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod numerics;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
