//! Voxel grids, clips, IoU metrics, synthetic domains, splits and file I/O.

pub mod clip;
pub mod grid;
pub mod io;
pub mod iou;
pub mod split;
pub mod synth;

pub use clip::{densify_sequence, Pose, SequenceClip};
pub use grid::{voxelize_points, OccupancyGrid};
pub use io::{load_clip, load_grid, save_clip, save_grid};
pub use iou::{iou, miou, MiouResult};
pub use split::{split_fraction, DatasetSplit};
pub use synth::{synth_scene, synth_scene_with, Domain, SceneConfig};
