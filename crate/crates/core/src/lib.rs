//! Feed-forward voxel-aligned Gaussian splatting engine.
//!
//! Multi-view images are turned into per-pixel features and depths, lifted to
//! a featured point cloud, pooled into a sparse voxel grid, refined by a sparse
//! 3D U-Net and decoded into one Gaussian per occupied voxel, which a tile
//! rasterizer renders into novel views.

mod bytes;
pub mod error;
pub mod features;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod sparse;
pub mod synth;
pub mod unet;
pub mod voxel;
pub mod weights;

pub use error::{Error, Result};
pub use gaussian::{Gaussian3D, GaussianSet};
pub use geometry::{Camera, CameraView, DepthMap, Extrinsics, Intrinsics};
pub use image::Image;
pub use pipeline::{run_pipeline, PipelineConfig};

/// Engine version, as reported by the CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
