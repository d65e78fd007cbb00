//! Measuring and correcting scale disequilibrium in multi-level feature fusion.
//!
//! Bilinear upsampling shrinks feature variance, so the branches a decoder
//! concatenates before its fusion convolution arrive on different scales and the
//! fusion weights see unequal gradient magnitudes. This crate provides the
//! numerical pieces to observe that (moment statistics, operators, a small
//! reverse-mode tape, toy decoder heads) and to correct it with scale equalizers,
//! either injected as fixed affine normalizations or folded into the fusion
//! weights once before training.

pub mod autodiff;
pub mod config;
pub mod decoders;
pub mod equalizer;
pub mod error;
pub mod experiments;
pub mod io;
pub mod ops;
pub mod partition;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use partition::ChannelPartition;
pub use rng::{randn, Rng};
pub use stats::{channel_moments, moments, Moments};
pub use tensor::{concat_channels, DType, Shape, Tensor};
