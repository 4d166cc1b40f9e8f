//! Unpaired retinal fundus restoration with a cycle-consistent adversarial
//! model whose residual blocks carry convolutional block attention, plus an
//! attention-augmented UNet for vessel segmentation.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64` tensors
//! ([`tape`]), with convolution kernels in [`kernels`] that fan out over rayon
//! when the `parallel` feature is enabled.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod probe;
pub mod segnet;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
