//! The latent world model (compressor plus velocity network) and its
//! training loops.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{trajectory_features, EncodedWindows};
use crate::cfm::{cfm_loss, euler_sample, Condition, FlowConfig, VelocityModel};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::likelihood::{solve_logprob, Divergence, FlowField, LogProb, OdeConfig};
use crate::numerics::mlp::ParamScope;
use crate::numerics::rng::{below, Rng};
use crate::numerics::{adamw_step, AdamWConfig, AdamWState, EmaState, LrSchedule, Tensor};
use crate::occupancy::{Domain, OccupancyGrid, SequenceClip};
use crate::vae::{vae_loss, VaeConfig, VaeModel, VaeTrainConfig};

/// Adapter settings recorded with a model that carries LoRA weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub domain: Domain,
    pub vae: VaeModel,
    pub flow: VelocityModel,
    pub flow_cfg: FlowConfig,
    /// Shadow of `flow.params(All)`, used for sampling and likelihood.
    pub ema: EmaState,
    pub lora: Option<LoraSpec>,
}

/// Forecast of one clip: decoded frames and unscaled latents `(horizon, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub frames: Vec<OccupancyGrid>,
    pub latents: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    domain: Domain,
    vae: VaeConfig,
    flow: FlowConfig,
    frame_len: usize,
    ema_decay: f64,
    lora: Option<LoraSpec>,
}

impl WorldModel {
    pub fn new(vae: VaeModel, flow: VelocityModel, flow_cfg: FlowConfig, domain: Domain, ema_decay: f64) -> Result<Self> {
        let [h, w, c] = vae.latent_dims();
        if flow.frame_len != h * w * c {
            return dim_err(format!("flow frame length {} vs latent {}", flow.frame_len, h * w * c));
        }
        let ema = EmaState::new(ema_decay, &flow.params(ParamScope::All));
        Ok(Self {
            domain,
            vae,
            flow,
            flow_cfg,
            ema,
            lora: None,
        })
    }

    /// Randomly initialized compressor and flow for `domain`.
    pub fn init(cfg: &ExperimentConfig, domain: Domain, vae_rng: &mut Rng, flow_rng: &mut Rng) -> Result<Self> {
        let vae = VaeModel::init(cfg.vae_config(domain), vae_rng)?;
        let flow = VelocityModel::init(cfg.frame_len(), &cfg.flow, flow_rng)?;
        Self::new(vae, flow, cfg.flow.clone(), domain, cfg.optim.ema_decay)
    }

    pub fn frame_len(&self) -> usize {
        self.flow.frame_len
    }

    /// Restarts the EMA shadow from the current flow weights.
    pub fn reset_ema(&mut self) {
        self.ema = EmaState::new(self.ema.decay, &self.flow.params(ParamScope::All));
    }

    /// Attaches zero-initialized adapters and restarts the EMA over the new
    /// parameter list.
    pub fn attach_lora(&mut self, spec: LoraSpec, rng: &mut Rng) -> Result<()> {
        self.flow.attach_lora(spec.rank, spec.alpha, rng)?;
        self.lora = Some(spec);
        self.reset_ema();
        Ok(())
    }

    /// Copy of the flow carrying the EMA weights.
    pub fn eval_flow(&self) -> VelocityModel {
        let mut f = self.flow.clone();
        for (p, s) in f.params_mut(ParamScope::All).into_iter().zip(&self.ema.shadow) {
            p.data_mut().copy_from_slice(s.data());
        }
        f
    }

    /// Posterior means, one flattened `(h*w*c)` row per frame.
    pub fn encode_mu(&self, frames: &[&OccupancyGrid]) -> Result<Tensor> {
        let (mu, _) = self.vae.encode_batch(frames)?;
        mu.reshape(vec![frames.len(), self.frame_len()])
    }

    /// Flow-scale latents of clips with `history + horizon` frames or more.
    pub fn encode_windows(&self, clips: &[&SequenceClip]) -> Result<EncodedWindows> {
        encode_windows(&self.vae, &self.flow_cfg, clips)
    }

    /// History condition of each clip in flow scale.
    pub fn condition(&self, clips: &[&SequenceClip]) -> Result<Condition> {
        let hist = self.flow_cfg.history;
        let frames: Vec<&OccupancyGrid> = clips.iter().flat_map(|c| c.frames()[..hist].iter()).collect();
        let mu = self.encode_mu(&frames)?;
        let history = mu.reshape(vec![clips.len(), hist * self.frame_len()])?.scale(self.flow_cfg.latent_scale);
        Condition::new(history, trajectory_features(clips, hist)?)
    }

    /// Samples future latents for every clip and decodes them.
    pub fn forecast(&self, clips: &[&SequenceClip], nfe: usize, cfg_scale: f64, rng: &mut Rng) -> Result<Vec<Forecast>> {
        if clips.is_empty() {
            return arg_err("no clips to forecast");
        }
        let cond = self.condition(clips)?;
        let fc = FlowConfig {
            nfe,
            cfg_scale,
            ..self.flow_cfg.clone()
        };
        let z = euler_sample(&self.eval_flow(), &cond, &fc, rng)?;
        let l = self.frame_len();
        let hor = self.flow_cfg.horizon;
        let mut out = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let like = &clip.frames()[self.flow_cfg.history - 1];
            let row = z.row(i);
            let frames = (0..hor)
                .map(|k| self.vae.decode_grid(&Tensor::from_vec(row[k * l..(k + 1) * l].to_vec()), like))
                .collect::<Result<Vec<_>>>()?;
            out.push(Forecast {
                frames,
                latents: Tensor::new(vec![hor, l], row.to_vec())?,
            });
        }
        Ok(out)
    }

    /// Log-density of a clip's future latents (flow scale) given its history,
    /// under the EMA flow guided with `cfg_scale`.
    pub fn log_prob(&self, clip: &SequenceClip, cfg_scale: f64, ode: &OdeConfig, div: Divergence, rng: &mut Rng) -> Result<LogProb> {
        let enc = self.encode_windows(&[clip])?;
        let flow = self.eval_flow();
        let field = FlowField::new(&flow, enc.condition()?, cfg_scale)?;
        solve_logprob(&field, enc.future.row(0), ode, div, rng)
    }

    pub fn to_checkpoint(&self, kind: &str, config_hash: &str, seed: u64, steps: BTreeMap<String, u64>) -> Result<Checkpoint> {
        let meta = ModelMeta {
            domain: self.domain,
            vae: self.vae.config.clone(),
            flow: self.flow_cfg.clone(),
            frame_len: self.frame_len(),
            ema_decay: self.ema.decay,
            lora: self.lora,
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        tensors.extend(self.vae.named_params("vae").into_iter().map(|(n, t)| (n, t.clone())));
        tensors.extend(self.flow.named_params("flow").into_iter().map(|(n, t)| (n, t.clone())));
        tensors.extend(self.ema.shadow.iter().enumerate().map(|(i, t)| (format!("ema.{i}"), t.clone())));
        Checkpoint::new(kind, config_hash, seed, steps, serde_json::to_value(meta)?, tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.manifest.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        // shapes come from the configs; values are overwritten below
        let mut rng = crate::numerics::seeded(0);
        let vae = VaeModel::init(meta.vae.clone(), &mut rng)?;
        let flow = VelocityModel::init(meta.frame_len, &meta.flow, &mut rng)?;
        let mut m = Self::new(vae, flow, meta.flow, meta.domain, meta.ema_decay)?;
        if let Some(spec) = meta.lora {
            m.attach_lora(spec, &mut rng)?;
        }
        for (name, t) in m.vae.named_params_mut("vae").into_iter().chain(m.flow.named_params_mut("flow")) {
            let src = ck.require(&name)?;
            if src.shape() != t.shape() {
                return dim_err(format!("tensor {name}: {:?} vs {:?}", src.shape(), t.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        for (i, s) in m.ema.shadow.iter_mut().enumerate() {
            let src = ck.require(&format!("ema.{i}"))?;
            s.same_shape(src)?;
            s.data_mut().copy_from_slice(src.data());
        }
        Ok(m)
    }
}

/// Flow-scale latents of clip windows under `vae`.
pub fn encode_windows(vae: &VaeModel, flow_cfg: &FlowConfig, clips: &[&SequenceClip]) -> Result<EncodedWindows> {
    let (hist, hor) = (flow_cfg.history, flow_cfg.horizon);
    let n = clips.len();
    if n == 0 {
        return arg_err("no clips to encode");
    }
    if let Some(c) = clips.iter().find(|c| c.len() < hist + hor) {
        return dim_err(format!("clip of {} frames, window needs {}", c.len(), hist + hor));
    }
    let frames: Vec<&OccupancyGrid> = clips.iter().flat_map(|c| c.frames()[..hist + hor].iter()).collect();
    let (mu, _) = vae.encode_batch(&frames)?;
    let [h, w, c] = vae.latent_dims();
    let l = h * w * c;
    let mu = mu.scale(flow_cfg.latent_scale);
    let mut history = Vec::with_capacity(n * hist * l);
    let mut future = Vec::with_capacity(n * hor * l);
    for i in 0..n {
        let base = i * (hist + hor) * l;
        history.extend_from_slice(&mu.data()[base..base + hist * l]);
        future.extend_from_slice(&mu.data()[base + hist * l..base + (hist + hor) * l]);
    }
    Ok(EncodedWindows {
        history: Tensor::new(vec![n, hist * l], history)?,
        trajectory: trajectory_features(clips, hist)?,
        future: Tensor::new(vec![n, hor * l], future)?,
    })
}

/// Optimizer settings of one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub batch: usize,
}

impl Phase {
    fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, self.warmup.min(self.steps), self.steps)
    }
}

/// Per-step losses of a training phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }
}

fn batch_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| below(rng, n)).collect()
}

/// Trains the compressor on `grids`; `targets[i]` is the alignment latent of
/// `grids[i]` in aligned mode.
pub fn train_vae(
    vae: &mut VaeModel,
    grids: &[&OccupancyGrid],
    targets: Option<&[Tensor]>,
    tcfg: &VaeTrainConfig,
    phase: Phase,
    beta1: f64,
    rng: &mut Rng,
) -> Result<TrainLog> {
    if grids.is_empty() {
        return arg_err("no grids to train on");
    }
    if let Some(t) = targets {
        if t.len() != grids.len() {
            return dim_err(format!("{} targets for {} grids", t.len(), grids.len()));
        }
    }
    let opt = AdamWConfig {
        beta1,
        ..AdamWConfig::vae()
    };
    let mut state = AdamWState::new(opt, &vae.params());
    let sched = phase.schedule();
    let mut log = TrainLog::default();
    for step in 0..phase.steps {
        let idx = batch_indices(grids.len(), phase.batch, rng);
        let batch: Vec<&OccupancyGrid> = idx.iter().map(|&i| grids[i]).collect();
        let tb: Option<Vec<Tensor>> = targets.map(|t| idx.iter().map(|&i| t[i].clone()).collect());
        let out = vae_loss(vae, &batch, tb.as_deref(), tcfg, rng).map_err(|e| Error::Training {
            step,
            detail: format!("vae loss: {e}"),
        })?;
        adamw_step(&mut vae.params_mut(), &out.grads.into_tensors(), &mut state, sched.lr_at_step(step))
            .map_err(|e| Error::Training { step, detail: format!("vae update: {e}") })?;
        log.losses.push(out.total);
    }
    Ok(log)
}

/// Trains the parameters of `flow` selected by `scope` on encoded windows,
/// updating `ema` over all flow parameters after every step.
pub fn train_flow(
    flow: &mut VelocityModel,
    ema: &mut EmaState,
    data: &EncodedWindows,
    cfg: &FlowConfig,
    scope: ParamScope,
    phase: Phase,
    rng: &mut Rng,
) -> Result<TrainLog> {
    if data.is_empty() {
        return arg_err("no windows to train on");
    }
    let mut state = AdamWState::new(AdamWConfig::flow(), &flow.params(scope));
    let sched = phase.schedule();
    let mut log = TrainLog::default();
    for step in 0..phase.steps {
        let idx = batch_indices(data.len(), phase.batch, rng);
        let batch = data.batch(&idx)?;
        let out = cfm_loss(flow, &batch, cfg, rng).map_err(|e| Error::Training {
            step,
            detail: format!("flow loss: {e}"),
        })?;
        adamw_step(&mut flow.params_mut(scope), &out.grads.into_tensors(scope), &mut state, sched.lr_at_step(step))
            .map_err(|e| Error::Training { step, detail: format!("flow update: {e}") })?;
        ema.update(&flow.params(ParamScope::All))?;
        log.losses.push(out.loss);
    }
    Ok(log)
}
