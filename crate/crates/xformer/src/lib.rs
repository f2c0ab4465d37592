//! Xformer: a dual-branch spatial/channel attention encoder-decoder for
//! image denoising, built on a self-contained reverse-mode tensor core.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Result, XError};
pub use tensor::conv::ConvKernel;
pub use tensor::{numeric_gradient, Scalar, Tensor};
