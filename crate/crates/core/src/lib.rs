//! Contrastive self-supervised learning at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: n-dimensional arrays, a recording tape for reverse-mode
//!   differentiation and an SGD-with-momentum optimizer.
//! * [`dataio`]: CIFAR binary ingestion, the synthetic shapes generator,
//!   stratified label budgets and checkpoint files.
//! * [`augment`]: seedable image transforms and the named presets used to
//!   build contrastive view pairs.
//! * [`nets`]: small residual / plain convolutional encoders, heads and
//!   freeze control.
//! * [`learn`]: NT-Xent pretraining, fine-tuning, teacher-forcing
//!   distillation and transfer sweeps.

pub mod augment;
pub mod dataio;
mod error;
mod rng;
pub mod learn;
pub mod nets;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
