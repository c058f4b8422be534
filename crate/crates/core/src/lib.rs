//! Multi-scale attention feature extraction for scene classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense tensors and a reverse-mode tape.
//! * [`layers`]: convolution, batch norm, pooling, dropout and loss kernels.
//! * [`msafeb`]: the multi-scale attention feature extraction block.
//! * [`backbone`]: a small strided CNN producing K×H×W feature maps, plus the
//!   binary feature-file format.
//! * [`data`]: PPM datasets, the synthetic grating generator, stratified
//!   splits and augmentation.
//! * [`train`]: model assembly, Adam, early-stopped training, evaluation,
//!   statistics and checkpoints.
//! * [`explain`]: Grad-CAM maps and heatmap overlays.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod layers;
pub mod msafeb;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
