//! Forward-only data path of a dynamic sparse voxel transformer backbone.
//!
//! Point clouds are voxelized into a sparse grid, grouped into fixed-size 3D
//! windows, and each window's voxels are split into size-equalized sets that
//! one batched masked-attention call processes for the whole scene. Blocks
//! alternate X-/Y-major set partitions and hybrid window sizes; the voxel
//! variant pools the Z axis between stages with attention-style pooling. The
//! benchmark harness compares this batching against fully-padded windows and
//! capacity bucketing.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod params;
pub mod pooling;
pub mod selfcheck;
pub mod set_partition;
pub mod tensor;
pub mod voxel;
pub mod window;

pub use error::{Error, Result};
pub use tensor::FeatureTensor;
