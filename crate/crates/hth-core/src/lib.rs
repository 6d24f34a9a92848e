//! Hybrid quasiseparable-SSM / self-attention diffusion denoiser at desk
//! scale: numerics and autodiff, the selective-SSM kernel in its equivalent
//! forms, the bidirectional quasiseparable token mixer, scan-order planning
//! over 2D/3D token grids, the hybrid block stack, a toy rectified-flow
//! train/sample harness, and scaling benchmarks.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod hydra;
pub mod kernels;
pub mod model;
pub mod parallel;
pub mod scan;
pub mod ssd;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{HthError, Result};
pub use tensor::Tensor;
