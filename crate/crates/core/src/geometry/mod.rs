//! Synthetic multiview scenes, voxel superpoints and positional encodings.

mod encoding;
pub mod io;
mod scene;
mod voxel;

pub use encoding::{sinusoidal_encode, OMEGA_MAX, OMEGA_MIN};
pub use scene::{
    generate_scene, overlap_matrix, overlap_ratio, transform_scene, PointCloud, Scene, SceneConfig,
};
pub use voxel::{
    voxel_downsample_hierarchy, SuperpointLevel, SuperpointSet, DEFAULT_BASE_VOXEL, DEFAULT_LEVELS,
};
