//! Residual attention graph convolution for 3D scene classification.
//!
//! The crate covers the full pipeline: depth captures to point clouds,
//! neighborhood graphs over a uniform grid, edge-conditioned convolution with
//! generated filters, voxel pooling, a residual classifier trained with a
//! small reverse-mode autodiff engine, and the file formats around it.

pub mod ablation;
pub mod agc;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod graph;
pub mod io;
pub mod layers;
pub mod model;
pub mod pointcloud;
pub mod pool;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Network, NetworkConfig, PolicyKind};
pub use pointcloud::{DepthImage, PointCloud};
pub use tensor::Tensor;
