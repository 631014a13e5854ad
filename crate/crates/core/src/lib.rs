//! Laplacian pyramid translation network on the CPU.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: NCHW tensors and numeric kernels (convolution, resampling, normalisation).
//! - [`autodiff`]: a recording tape for reverse-mode gradients and an eager executor.
//! - [`pyramid`]: closed-form Laplacian pyramid decomposition and reconstruction.
//! - [`net`]: the generator (low-band translator, mask network, progressive
//!   mask refinement) and the multi-scale patch discriminator.
//! - [`train`]: losses, Adam, the toy domain pair, metrics and the training loop.
//! - [`io`]: PPM/PNG images and the tensor archive used for checkpoints.
//! - [`gradcheck`]: finite-difference verification of every differentiable op.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod net;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
