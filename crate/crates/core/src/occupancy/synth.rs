//! Procedural stand-ins for the source and target datasets: a ground plane,
//! static walls and box agents under constant-velocity motion.

use serde::{Deserialize, Serialize};

use super::clip::{Pose, SequenceClip};
use super::grid::OccupancyGrid;
use crate::error::{arg_err, Result};
use crate::numerics::rng::{below, bernoulli, derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Outdoor,
    Indoor,
    Semantic,
    HighRes,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Outdoor, Domain::Indoor, Domain::Semantic, Domain::HighRes];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Outdoor => "outdoor",
            Domain::Indoor => "indoor",
            Domain::Semantic => "semantic",
            Domain::HighRes => "high_res",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown domain {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Base voxel counts (H, W, D).
    pub dims: [usize; 3],
    /// Meters per voxel at base resolution.
    pub resolution: f32,
    pub n_walls: usize,
    pub n_agents: usize,
    /// Agent categories in the semantic domain.
    pub agent_categories: usize,
    pub ground: bool,
    /// Seconds between frames.
    pub frame_dt: f64,
    /// Ego advance along x, in base voxels per frame.
    pub ego_speed: f64,
    /// Class count of the indoor analog (2 = binary occupancy).
    pub indoor_classes: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 8],
            resolution: 0.5,
            n_walls: 3,
            n_agents: 3,
            agent_categories: 2,
            ground: true,
            frame_dt: 0.5,
            ego_speed: 0.0,
            indoor_classes: 2,
        }
    }
}

impl SceneConfig {
    /// Class count of clips generated for `domain`.
    pub fn n_classes(&self, domain: Domain) -> u32 {
        match domain {
            Domain::Semantic => 3 + self.agent_categories as u32,
            Domain::Indoor => self.indoor_classes.max(2),
            Domain::Outdoor | Domain::HighRes => 2,
        }
    }

    /// Grid dims of clips generated for `domain`.
    pub fn domain_dims(&self, domain: Domain) -> [usize; 3] {
        match domain {
            Domain::HighRes => [self.dims[0] * 2, self.dims[1] * 2, self.dims[2] * 2],
            _ => self.dims,
        }
    }
}

pub const GROUND_LABEL: u8 = 1;
pub const STATIC_LABEL: u8 = 2;
pub const FIRST_AGENT_LABEL: u8 = 3;

/// Axis-aligned solid in base-voxel units, translating by `vel` per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Solid {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub vel: [f64; 2],
    pub label: u8,
}

impl Solid {
    fn at_frame(&self, f: usize) -> ([f64; 3], [f64; 3]) {
        let dx = self.vel[0] * f as f64;
        let dy = self.vel[1] * f as f64;
        (
            [self.lo[0] + dx, self.lo[1] + dy, self.lo[2]],
            [self.hi[0] + dx, self.hi[1] + dy, self.hi[2]],
        )
    }
}

/// World layout shared by every domain rendered from the same seed.
/// Outdoor, semantic and high-res clips of one seed see the same world.
pub fn scene_solids(cfg: &SceneConfig, domain: Domain, seed: u64, n_frames: usize) -> Vec<Solid> {
    let indoor = domain == Domain::Indoor;
    let mut rng = seeded(derive_seed(seed, if indoor { 2 } else { 1 }));
    let [h, w, d] = cfg.dims;
    let (hf, wf, df) = (h as f64, w as f64, d as f64);
    let mut solids = Vec::new();
    let base_z = if cfg.ground { 1.0 } else { 0.0 };
    if cfg.ground {
        solids.push(Solid {
            lo: [0.0, 0.0, 0.0],
            hi: [hf, wf, 1.0],
            vel: [0.0, 0.0],
            label: GROUND_LABEL,
        });
    }
    let n_walls = if indoor { cfg.n_walls + 2 } else { cfg.n_walls };
    for _ in 0..n_walls {
        let along_x = bernoulli(&mut rng, 0.5);
        let (long, short) = if along_x { (h, w) } else { (w, h) };
        let len = (long / 4 + below(&mut rng, long / 4 + 1)).max(2).min(long);
        let start = below(&mut rng, long - len + 1) as f64;
        let fixed = below(&mut rng, short) as f64;
        let top = if indoor {
            df
        } else {
            (base_z + 2.0 + below(&mut rng, d.saturating_sub(2).max(1)) as f64).min(df)
        };
        let (lo, hi) = if along_x {
            ([start, fixed, base_z], [start + len as f64, fixed + 1.0, top])
        } else {
            ([fixed, start, base_z], [fixed + 1.0, start + len as f64, top])
        };
        solids.push(Solid {
            lo,
            hi,
            vel: [0.0, 0.0],
            label: STATIC_LABEL,
        });
    }
    let n_agents = if indoor { cfg.n_agents * 2 } else { cfg.n_agents };
    let span = n_frames.saturating_sub(1) as f64;
    for _ in 0..n_agents {
        let size = |rng: &mut Rng| -> f64 {
            if indoor {
                1.0 + below(rng, 2) as f64
            } else {
                2.0 + below(rng, 2) as f64
            }
        };
        let (sx, sy) = (size(&mut rng), size(&mut rng));
        let sz = (1.0 + below(&mut rng, 2) as f64).min(df - base_z).max(1.0);
        let mut vel = [below(&mut rng, 3) as f64 - 1.0, below(&mut rng, 3) as f64 - 1.0];
        let category = below(&mut rng, cfg.agent_categories.max(1)) as u8;
        let half = if bernoulli(&mut rng, 0.5) { 0.5 } else { 0.0 };
        let mut lo = [0.0; 2];
        for (a, (extent, s)) in [(hf, sx), (wf, sy)].into_iter().enumerate() {
            // keep the agent inside the grid for the whole clip
            let travel = vel[a] * span;
            let (mut min, mut max) = (travel.min(0.0).abs(), extent - s - travel.max(0.0) - 0.5);
            if max < min {
                vel[a] = 0.0;
                min = 0.0;
                max = extent - s - 0.5;
            }
            let slots = (max - min).floor().max(0.0) as usize + 1;
            lo[a] = (min + below(&mut rng, slots) as f64 + half).min(max.max(min));
        }
        solids.push(Solid {
            lo: [lo[0], lo[1], base_z],
            hi: [lo[0] + sx, lo[1] + sy, base_z + sz],
            vel,
            label: FIRST_AGENT_LABEL + category,
        });
    }
    solids
}

fn render_frame(
    solids: &[Solid],
    cfg: &SceneConfig,
    domain: Domain,
    frame: usize,
    pose: &Pose,
) -> Result<OccupancyGrid> {
    let dims = cfg.domain_dims(domain);
    // render voxels per base voxel along each axis
    let scale = if domain == Domain::HighRes { 0.5 } else { 1.0 };
    let resolution = cfg.resolution * scale as f32;
    let origin = [
        -(cfg.dims[0] as f32) * cfg.resolution / 2.0,
        -(cfg.dims[1] as f32) * cfg.resolution / 2.0,
        0.0,
    ];
    let n_classes = cfg.n_classes(domain);
    let mut grid = OccupancyGrid::empty(dims, resolution, origin, n_classes)?;
    let shift = [pose.x / f64::from(cfg.resolution), pose.y / f64::from(cfg.resolution), 0.0];
    for s in solids {
        let (lo, hi) = s.at_frame(frame);
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            // voxel i is inside when lo <= (i + 0.5) * scale + shift < hi
            let first = ((lo[a] - shift[a]) / scale - 0.5).ceil().max(0.0);
            let end = ((hi[a] - shift[a]) / scale - 0.5).ceil().min(dims[a] as f64);
            range[a] = (first as usize, end.max(first) as usize);
        }
        let label = match domain {
            Domain::Semantic => s.label,
            Domain::Indoor if n_classes > 2 => s.label.min((n_classes - 1) as u8),
            _ => 1,
        };
        for x in range[0].0..range[0].1 {
            for y in range[1].0..range[1].1 {
                for z in range[2].0..range[2].1 {
                    grid.set(x, y, z, label);
                }
            }
        }
    }
    Ok(grid)
}

/// Synthetic clip for `domain` with default scene settings.
pub fn synth_scene(domain: Domain, seed: u64, n_frames: usize) -> Result<SequenceClip> {
    synth_scene_with(&SceneConfig::default(), domain, seed, n_frames)
}

pub fn synth_scene_with(
    cfg: &SceneConfig,
    domain: Domain,
    seed: u64,
    n_frames: usize,
) -> Result<SequenceClip> {
    if n_frames < 2 {
        return arg_err("synthetic clips need at least two frames");
    }
    if cfg.dims[0] < 4 || cfg.dims[1] < 4 || cfg.dims[2] < 2 {
        return arg_err(format!("scene dims {:?} too small", cfg.dims));
    }
    let mut scene_cfg = cfg.clone();
    if domain == Domain::Indoor {
        // smaller metric extent, same voxel counts
        scene_cfg.resolution = cfg.resolution * 0.5;
    }
    let solids = scene_solids(&scene_cfg, domain, seed, n_frames);
    let res = f64::from(scene_cfg.resolution);
    let poses: Vec<Pose> = (0..n_frames)
        .map(|f| Pose::new(f as f64 * scene_cfg.ego_speed * res, 0.0, 0.0))
        .collect();
    let frames = (0..n_frames)
        .map(|f| render_frame(&solids, &scene_cfg, domain, f, &poses[f]))
        .collect::<Result<Vec<_>>>()?;
    let timestamps = (0..n_frames).map(|f| f as f64 * scene_cfg.frame_dt).collect();
    SequenceClip::new(frames, poses, timestamps)
}
