use serde::{Deserialize, Serialize};

use super::grid::OccupancyGrid;
use crate::error::{arg_err, dim_err, Result};

/// Planar ego pose: translation in meters and heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// Ego-frame point to world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y, p[2]]
    }

    /// World-frame point to ego frame.
    pub fn to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy, p[2]]
    }

    /// `other` expressed relative to `self`.
    pub fn relative(&self, other: &Pose) -> Pose {
        let p = self.to_ego([other.x, other.y, 0.0]);
        Pose::new(p[0], p[1], other.yaw - self.yaw)
    }
}

/// Ordered frames with per-frame ego poses and timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClip {
    frames: Vec<OccupancyGrid>,
    poses: Vec<Pose>,
    timestamps: Vec<f64>,
    trajectory: Vec<Pose>,
}

impl SequenceClip {
    pub fn new(frames: Vec<OccupancyGrid>, poses: Vec<Pose>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return arg_err("clip needs at least one frame");
        }
        if frames.len() != poses.len() || frames.len() != timestamps.len() {
            return dim_err(format!(
                "{} frames, {} poses, {} timestamps",
                frames.len(),
                poses.len(),
                timestamps.len()
            ));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return arg_err("timestamps must be strictly increasing");
        }
        let first = &frames[0];
        if frames.iter().any(|f| {
            f.dims() != first.dims()
                || f.resolution() != first.resolution()
                || f.origin() != first.origin()
                || f.n_classes() != first.n_classes()
        }) {
            return dim_err("frames disagree on grid geometry");
        }
        let mut trajectory = vec![Pose::default()];
        trajectory.extend(poses.windows(2).map(|w| w[0].relative(&w[1])));
        Ok(Self {
            frames,
            poses,
            timestamps,
            trajectory,
        })
    }

    pub fn frames(&self) -> &[OccupancyGrid] {
        &self.frames
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Per-frame pose delta relative to the previous frame (zero for the first).
    pub fn trajectory(&self) -> &[Pose] {
        &self.trajectory
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sub-clip of frames `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return arg_err(format!("window [{start}, {end}) of {} frames", self.len()));
        }
        Self::new(
            self.frames[start..end].to_vec(),
            self.poses[start..end].to_vec(),
            self.timestamps[start..end].to_vec(),
        )
    }

    pub fn map_frames(&self, f: impl Fn(&OccupancyGrid) -> Result<OccupancyGrid>) -> Result<Self> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.poses.clone(), self.timestamps.clone())
    }
}

/// Accumulates every frame's occupied voxels into each frame's ego
/// coordinates with nearest-voxel resampling. Where frames disagree on a
/// voxel's class, the frame nearest in time wins (earlier index on ties).
pub fn densify_sequence(clip: &SequenceClip) -> Result<SequenceClip> {
    let n = clip.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let target = &clip.frames[t];
        let mut dense = target.blank_like();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let da = (clip.timestamps[a] - clip.timestamps[t]).abs();
            let db = (clip.timestamps[b] - clip.timestamps[t]).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        for s in order {
            let src = &clip.frames[s];
            for (x, y, z, c) in src.occupied() {
                let world = clip.poses[s].to_world(src.voxel_center(x, y, z));
                let ego = clip.poses[t].to_ego(world);
                if let Some([i, j, k]) = dense.voxel_of(ego) {
                    if dense.get(i, j, k) == 0 {
                        dense.set(i, j, k, c);
                    }
                }
            }
        }
        out.push(dense);
    }
    SequenceClip::new(out, clip.poses.clone(), clip.timestamps.clone())
}
