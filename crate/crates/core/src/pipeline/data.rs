//! Synthetic clip pools for each domain and their latent encodings.

use crate::cfm::{CfmBatch, Condition, TRAJ_FEATURES};
use crate::error::{dim_err, Result};
use crate::numerics::Tensor;
use crate::occupancy::{synth_scene_with, Domain, OccupancyGrid, SequenceClip};

use super::config::ExperimentConfig;

/// Clip of scene `seed` in `domain` at model resolution. High-res clips are
/// rendered at twice the resolution and pooled back.
pub fn domain_clip(cfg: &ExperimentConfig, domain: Domain, seed: u64) -> Result<SequenceClip> {
    let clip = synth_scene_with(&cfg.scene, domain, seed, cfg.clip_frames())?;
    if domain == Domain::HighRes {
        clip.map_frames(|g| g.downsample(2))
    } else {
        Ok(clip)
    }
}

fn pool(cfg: &ExperimentConfig, domain: Domain, offset: u64, n: usize) -> Result<Vec<SequenceClip>> {
    (0..n as u64).map(|i| domain_clip(cfg, domain, offset + i)).collect()
}

/// Pretraining clips of the source domain.
pub fn source_pool(cfg: &ExperimentConfig) -> Result<Vec<SequenceClip>> {
    pool(cfg, cfg.source, cfg.data.source_seed_offset, cfg.data.pretrain_clips)
}

/// Fine-tuning pool of a target domain; fractions index into it.
pub fn target_pool(cfg: &ExperimentConfig, domain: Domain) -> Result<Vec<SequenceClip>> {
    pool(cfg, domain, cfg.data.target_seed_offset, cfg.data.target_clips)
}

pub fn validation_pool(cfg: &ExperimentConfig, domain: Domain) -> Result<Vec<SequenceClip>> {
    pool(cfg, domain, cfg.data.val_seed_offset, cfg.data.val_clips)
}

/// Geometry partner of a frame: its binary occupancy.
pub fn dense_partner(g: &OccupancyGrid) -> OccupancyGrid {
    g.erase_labels()
}

/// Every frame of every clip, in clip order.
pub fn all_frames(clips: &[SequenceClip]) -> Vec<&OccupancyGrid> {
    clips.iter().flat_map(|c| c.frames().iter()).collect()
}

/// Flow-scale latents of clip windows: history, trajectory and future rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedWindows {
    /// `(N, history * L)`
    pub history: Tensor,
    /// `(N, history * 3)`
    pub trajectory: Tensor,
    /// `(N, horizon * L)`
    pub future: Tensor,
}

impl EncodedWindows {
    pub fn len(&self) -> usize {
        self.history.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn condition(&self) -> Result<Condition> {
        Condition::new(self.history.clone(), self.trajectory.clone())
    }

    pub fn batch(&self, idx: &[usize]) -> Result<CfmBatch> {
        let all = self.condition()?;
        CfmBatch::new(all.select(idx)?, crate::cfm::select_rows(&self.future, idx)?)
    }
}

/// `(dx, dy, dyaw)` of the first `history` frames of each clip.
pub fn trajectory_features(clips: &[&SequenceClip], history: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(clips.len() * history * TRAJ_FEATURES);
    for c in clips {
        if c.len() < history {
            return dim_err(format!("clip of {} frames, history {history}", c.len()));
        }
        for p in &c.trajectory()[..history] {
            data.extend_from_slice(&[p.x, p.y, p.yaw]);
        }
    }
    Tensor::new(vec![clips.len(), history * TRAJ_FEATURES], data)
}
