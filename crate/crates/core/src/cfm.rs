//! Conditional flow matching over flattened latent frames.
//!
//! States live in the scaled latent space: `x_1 = latent_scale * z`. The path
//! is `x_t = (1 - t) eps + t x_1` and the regression target is `x_1 - eps`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::mlp::{sigmoid, Activation, Mlp, MlpGrads, ParamScope};
use crate::numerics::rng::{bernoulli, normal, normal_tensor, Rng};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Multiplier taking VAE latents into flow space.
    pub latent_scale: f64,
    pub cfg_drop: f64,
    pub cfg_scale: f64,
    pub nfe: usize,
    /// History frames fed as condition.
    pub history: usize,
    /// Future frames generated.
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub time_embed: usize,
    pub traj_embed: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            latent_scale: 10.0,
            cfg_drop: 0.25,
            cfg_scale: 2.0,
            nfe: 10,
            history: 2,
            horizon: 2,
            hidden: vec![256, 256],
            time_embed: 16,
            traj_embed: 8,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return arg_err("nfe must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.cfg_drop) {
            return arg_err(format!("cfg_drop {} outside [0, 1]", self.cfg_drop));
        }
        if !(self.latent_scale > 0.0) {
            return arg_err("latent_scale must be positive");
        }
        if self.horizon == 0 {
            return arg_err("horizon must be >= 1");
        }
        if self.time_embed % 2 != 0 {
            return arg_err("time embedding width must be even");
        }
        Ok(())
    }
}

/// Pose deltas per history frame: `(dx, dy, dyaw)`.
pub const TRAJ_FEATURES: usize = 3;

/// Condition for a batch: flattened history latents `(B, history*L)` in flow
/// scale, trajectory deltas `(B, history*3)` and per-sample drop flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub history: Tensor,
    pub trajectory: Tensor,
    pub dropped: Vec<bool>,
}

impl Condition {
    pub fn new(history: Tensor, trajectory: Tensor) -> Result<Self> {
        let b = history.rows();
        if trajectory.rows() != b {
            return dim_err(format!("{b} histories vs {} trajectories", trajectory.rows()));
        }
        Ok(Self {
            history,
            trajectory,
            dropped: vec![false; b],
        })
    }

    /// Condition with no history frames, for unconditional flows.
    pub fn empty(batch: usize) -> Self {
        Self {
            history: Tensor::zeros(&[batch, 0]),
            trajectory: Tensor::zeros(&[batch, 0]),
            dropped: vec![false; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.dropped.len()
    }

    /// Copy with every sample's condition zeroed and flagged.
    pub fn nulled(&self) -> Self {
        Self {
            history: Tensor::zeros(self.history.shape()),
            trajectory: Tensor::zeros(self.trajectory.shape()),
            dropped: vec![true; self.batch()],
        }
    }

    /// Rows `idx` of this condition.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            history: select_rows(&self.history, idx)?,
            trajectory: select_rows(&self.trajectory, idx)?,
            dropped: idx.iter().map(|&i| self.dropped[i]).collect(),
        })
    }
}

/// History and target future latents, both in flow scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmBatch {
    pub condition: Condition,
    /// `(B, horizon*L)`.
    pub future: Tensor,
}

impl CfmBatch {
    pub fn new(condition: Condition, future: Tensor) -> Result<Self> {
        if future.rows() != condition.batch() {
            return dim_err(format!("{} futures vs {} conditions", future.rows(), condition.batch()));
        }
        Ok(Self { condition, future })
    }

    pub fn len(&self) -> usize {
        self.future.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= t.rows() {
            return dim_err(format!("row {i} of {}", t.rows()));
        }
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data)
}

/// Concatenates 2-D tensors along columns.
pub(crate) fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
    let b = parts[0].rows();
    if parts.iter().any(|p| p.rows() != b) {
        return dim_err("row counts differ in column concat");
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(b * width);
    for i in 0..b {
        for p in parts {
            if p.cols() > 0 {
                data.extend_from_slice(p.row(i));
            }
        }
    }
    Tensor::new(vec![b, width], data)
}

/// Columns `[start, end)` of a 2-D tensor.
pub(crate) fn col_slice(t: &Tensor, start: usize, end: usize) -> Tensor {
    let b = t.rows();
    let mut data = Vec::with_capacity(b * (end - start));
    for i in 0..b {
        data.extend_from_slice(&t.row(i)[start..end]);
    }
    Tensor::new(vec![b, end - start], data).expect("sized")
}

/// `z * factor`.
pub fn rescale_latent(z: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) {
        return arg_err("rescale factor must be positive");
    }
    Ok(z.scale(factor))
}

/// Inverse of [`rescale_latent`].
pub fn unscale_latent(x: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) {
        return arg_err("rescale factor must be positive");
    }
    Ok(x.map(|v| v / factor))
}

/// `x_t = (1 - t) eps + t * sigma_scale * z`.
pub fn interpolate_path(eps: &Tensor, z: &Tensor, t: f64, sigma_scale: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return arg_err(format!("t = {t} outside [0, 1]"));
    }
    eps.zip_map(z, |e, zv| (1.0 - t) * e + t * (sigma_scale * zv))
}

/// Logit-normal time: `sigmoid(g)`, `g ~ N(0, 1)`.
pub fn sample_timestep(rng: &mut Rng) -> f64 {
    sigmoid(normal(rng))
}

/// Per-sample Bernoulli(p) condition dropout: selected samples get their
/// history and trajectory zeroed and their flag set.
pub fn drop_condition(batch: &CfmBatch, p: f64, rng: &mut Rng) -> Result<CfmBatch> {
    if !(0.0..=1.0).contains(&p) {
        return arg_err(format!("drop probability {p} outside [0, 1]"));
    }
    let mut out = batch.clone();
    let cond = &mut out.condition;
    for i in 0..cond.batch() {
        if bernoulli(rng, p) {
            cond.dropped[i] = true;
            if cond.history.cols() > 0 {
                cond.history.row_mut(i).fill(0.0);
            }
            if cond.trajectory.cols() > 0 {
                cond.trajectory.row_mut(i).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Joins `(T_h, ...)` history and `(T_f, ...)` future frames along time.
pub fn concat_joint(history: &Tensor, future: &Tensor) -> Result<Tensor> {
    if history.ndim() < 1 || history.shape()[1..] != future.shape()[1..] {
        return dim_err(format!("history {:?} vs future {:?}", history.shape(), future.shape()));
    }
    let mut shape = history.shape().to_vec();
    shape[0] += future.shape()[0];
    let mut data = history.data().to_vec();
    data.extend_from_slice(future.data());
    Tensor::new(shape, data)
}

/// Stacks equal-length `(T, h, w, c)` sequences along channels into
/// `(T, h, w, 2c)`.
pub fn concat_joint_channels(history: &Tensor, future: &Tensor) -> Result<Tensor> {
    if history.shape() != future.shape() || history.ndim() < 2 {
        return dim_err(format!("history {:?} vs future {:?}", history.shape(), future.shape()));
    }
    let c = history.cols();
    let mut shape = history.shape().to_vec();
    *shape.last_mut().expect("ndim >= 2") = 2 * c;
    let mut data = Vec::with_capacity(2 * history.len());
    for (a, b) in history.data().chunks(c).zip(future.data().chunks(c)) {
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    Tensor::new(shape, data)
}

/// `(1 + s) v_cond - s v_uncond`.
pub fn cfg_fuse(v_cond: &Tensor, v_uncond: &Tensor, s: f64) -> Result<Tensor> {
    v_cond.zip_map(v_uncond, |c, u| (1.0 + s) * c - s * u)
}

/// Sinusoidal features of `t`: `sin(pi 2^k t)`, `cos(pi 2^k t)`.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for k in 0..half {
        out.push((std::f64::consts::PI * (1u64 << k) as f64 * t).sin());
    }
    for k in 0..half {
        out.push((std::f64::consts::PI * (1u64 << k) as f64 * t).cos());
    }
    out
}

/// Velocity network: an MLP over `x_t`, the history latents, a linear
/// trajectory embedding and a sinusoidal time embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    /// Values per latent frame.
    pub frame_len: usize,
    pub history: usize,
    pub horizon: usize,
    pub time_embed: usize,
    pub traj: Option<Mlp>,
    pub backbone: Mlp,
}

/// Intermediates of one forward pass kept for backprop.
pub struct VelocityCache {
    backbone: crate::numerics::mlp::MlpCache,
    traj: Option<(crate::numerics::mlp::MlpCache, Vec<bool>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub backbone: MlpGrads,
    pub traj: Option<MlpGrads>,
}

impl FlowGrads {
    /// Same order as [`VelocityModel::params_mut`].
    pub fn into_tensors(self, scope: ParamScope) -> Vec<Tensor> {
        let mut out = self.backbone.into_tensors(scope);
        if let Some(t) = self.traj {
            out.extend(t.into_tensors(match scope {
                ParamScope::Adapters => ParamScope::Adapters,
                _ => ParamScope::Base,
            }));
        }
        out
    }
}

impl VelocityModel {
    pub fn init(frame_len: usize, cfg: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if frame_len == 0 {
            return arg_err("frame length must be >= 1");
        }
        let traj = if cfg.history > 0 && cfg.traj_embed > 0 {
            Some(Mlp::init(&[cfg.history * TRAJ_FEATURES, cfg.traj_embed], Activation::Identity, rng)?)
        } else {
            None
        };
        let traj_w = traj.as_ref().map_or(0, |m| m.fan_out());
        let x_len = cfg.horizon * frame_len;
        let mut dims = vec![x_len + cfg.history * frame_len + traj_w + cfg.time_embed];
        dims.extend(&cfg.hidden);
        dims.push(x_len);
        let backbone = Mlp::init(&dims, Activation::Silu, rng)?;
        Ok(Self {
            frame_len,
            history: cfg.history,
            horizon: cfg.horizon,
            time_embed: cfg.time_embed,
            traj,
            backbone,
        })
    }

    /// Flattened state length `horizon * frame_len`.
    pub fn state_len(&self) -> usize {
        self.horizon * self.frame_len
    }

    pub fn history_len(&self) -> usize {
        self.history * self.frame_len
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut Rng) -> Result<()> {
        self.backbone.attach_lora(rank, alpha, rng)
    }

    pub fn params(&self, scope: ParamScope) -> Vec<&Tensor> {
        let mut p = self.backbone.params(scope);
        if let Some(t) = &self.traj {
            if scope != ParamScope::Adapters {
                p.extend(t.params(ParamScope::Base));
            }
        }
        p
    }

    pub fn params_mut(&mut self, scope: ParamScope) -> Vec<&mut Tensor> {
        let mut p = self.backbone.params_mut(scope);
        if let Some(t) = &mut self.traj {
            if scope != ParamScope::Adapters {
                p.extend(t.params_mut(ParamScope::Base));
            }
        }
        p
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut p = self.backbone.named_params(&format!("{prefix}.backbone"));
        if let Some(t) = &self.traj {
            p.extend(t.named_params(&format!("{prefix}.traj")));
        }
        p
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut p = self.backbone.named_params_mut(&format!("{prefix}.backbone"));
        if let Some(t) = &mut self.traj {
            p.extend(t.named_params_mut(&format!("{prefix}.traj")));
        }
        p
    }

    fn check(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<()> {
        let b = x.rows();
        if x.cols() != self.state_len() || t.len() != b || cond.batch() != b {
            return dim_err(format!(
                "state {:?}, {} times, {} conditions for state length {}",
                x.shape(),
                t.len(),
                cond.batch(),
                self.state_len()
            ));
        }
        if cond.history.cols() != self.history_len() {
            return dim_err(format!("history width {} != {}", cond.history.cols(), self.history_len()));
        }
        if self.traj.is_some() && cond.trajectory.cols() != self.history * TRAJ_FEATURES {
            return dim_err(format!("trajectory width {}", cond.trajectory.cols()));
        }
        Ok(())
    }

    fn build_input(
        &self,
        x: &Tensor,
        t: &[f64],
        cond: &Condition,
    ) -> Result<(Tensor, Option<(crate::numerics::mlp::MlpCache, Vec<bool>)>)> {
        self.check(x, t, cond)?;
        let b = x.rows();
        let mut parts: Vec<Tensor> = Vec::new();
        let mut traj_cache = None;
        if let Some(tm) = &self.traj {
            let (mut emb, cache) = tm.forward_cached(&cond.trajectory)?;
            for (i, &d) in cond.dropped.iter().enumerate() {
                if d {
                    emb.row_mut(i).fill(0.0);
                }
            }
            parts.push(emb);
            traj_cache = Some((cache, cond.dropped.clone()));
        }
        let mut te = Vec::with_capacity(b * self.time_embed);
        for &ti in t {
            te.extend(time_embedding(ti, self.time_embed));
        }
        let te = Tensor::new(vec![b, self.time_embed], te)?;
        let mut all: Vec<&Tensor> = vec![x, &cond.history];
        all.extend(parts.iter());
        all.push(&te);
        Ok((hcat(&all)?, traj_cache))
    }

    /// Velocity `(B, state_len)` at states `x` and times `t`.
    pub fn forward(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<Tensor> {
        Ok(self.forward_cached(x, t, cond)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor, t: &[f64], cond: &Condition) -> Result<(Tensor, VelocityCache)> {
        let (input, traj) = self.build_input(x, t, cond)?;
        let (out, cache) = self.backbone.forward_cached(&input)?;
        Ok((
            out,
            VelocityCache {
                backbone: cache,
                traj,
            },
        ))
    }

    /// Parameter gradients of `<upstream, forward>` and the gradient with
    /// respect to `x`.
    pub fn backward(&self, cache: &VelocityCache, upstream: &Tensor) -> Result<(FlowGrads, Tensor)> {
        let (bg, din) = self.backbone.backward(&cache.backbone, upstream)?;
        let xl = self.state_len();
        let dx = col_slice(&din, 0, xl);
        let traj = match (&self.traj, &cache.traj) {
            (Some(tm), Some((tc, dropped))) => {
                let start = xl + self.history_len();
                let mut demb = col_slice(&din, start, start + tm.fan_out());
                for (i, &d) in dropped.iter().enumerate() {
                    if d {
                        demb.row_mut(i).fill(0.0);
                    }
                }
                Some(tm.backward(tc, &demb)?.0)
            }
            _ => None,
        };
        Ok((FlowGrads { backbone: bg, traj }, dx))
    }

    /// `v^T dG/dx` for each row.
    pub fn input_vjp(&self, x: &Tensor, t: &[f64], cond: &Condition, v: &Tensor) -> Result<Tensor> {
        let (input, _) = self.build_input(x, t, cond)?;
        let din = self.backbone.input_vjp(&input, v)?;
        Ok(col_slice(&din, 0, self.state_len()))
    }
}

#[derive(Debug, Clone)]
pub struct CfmLossOutput {
    pub loss: f64,
    pub grads: FlowGrads,
}

/// Rectified-flow loss with sampled times, noise and condition dropout.
pub fn cfm_loss(model: &VelocityModel, batch: &CfmBatch, cfg: &FlowConfig, rng: &mut Rng) -> Result<CfmLossOutput> {
    let dropped = drop_condition(batch, cfg.cfg_drop, rng)?;
    let t: Vec<f64> = (0..batch.len()).map(|_| sample_timestep(rng)).collect();
    let eps = normal_tensor(rng, batch.future.shape());
    cfm_loss_with(model, &dropped, &t, &eps)
}

/// Loss with explicit times and noise; `batch.future` is already in flow scale.
/// Squared error summed over dimensions and averaged over the batch.
pub fn cfm_loss_with(model: &VelocityModel, batch: &CfmBatch, t: &[f64], eps: &Tensor) -> Result<CfmLossOutput> {
    let b = batch.len();
    if b == 0 {
        return arg_err("empty batch");
    }
    eps.same_shape(&batch.future)?;
    let n = batch.future.cols();
    let mut xt = Tensor::zeros(eps.shape());
    let mut target = Tensor::zeros(eps.shape());
    for i in 0..b {
        let ti = t[i];
        if !(0.0..=1.0).contains(&ti) {
            return arg_err(format!("t = {ti} outside [0, 1]"));
        }
        let (e, z) = (eps.row(i), batch.future.row(i));
        let xr = xt.row_mut(i);
        for j in 0..n {
            xr[j] = (1.0 - ti) * e[j] + ti * z[j];
        }
        let tr = target.row_mut(i);
        for j in 0..n {
            tr[j] = z[j] - e[j];
        }
    }
    let (pred, cache) = model.forward_cached(&xt, t, &batch.condition)?;
    let mut loss = 0.0;
    let mut up = Tensor::zeros(pred.shape());
    for i in 0..b {
        let (p, q) = (pred.row(i), target.row(i));
        let mut li = 0.0;
        let u = up.row_mut(i);
        for j in 0..n {
            let d = p[j] - q[j];
            li += d * d;
            u[j] = 2.0 * d / b as f64;
        }
        if !li.is_finite() {
            return Err(Error::NonFinite(format!("cfm loss of sample {i}")));
        }
        loss += li;
    }
    let (grads, _) = model.backward(&cache, &up)?;
    Ok(CfmLossOutput {
        loss: loss / b as f64,
        grads,
    })
}

/// Velocity with guidance: one call when `s == 0`, else the fused pair.
pub fn guided_velocity(model: &VelocityModel, x: &Tensor, t: f64, cond: &Condition, s: f64) -> Result<Tensor> {
    let ts = vec![t; x.rows()];
    let vc = model.forward(x, &ts, cond)?;
    if s == 0.0 {
        return Ok(vc);
    }
    let vu = model.forward(x, &ts, &cond.nulled())?;
    cfg_fuse(&vc, &vu, s)
}

/// Euler sampling from standard-normal noise; returns latents divided by
/// `latent_scale`.
pub fn euler_sample(model: &VelocityModel, cond: &Condition, cfg: &FlowConfig, rng: &mut Rng) -> Result<Tensor> {
    let x0 = normal_tensor(rng, &[cond.batch(), model.state_len()]);
    euler_sample_from(model, cond, cfg, x0)
}

/// [`euler_sample`] from a given initial state.
pub fn euler_sample_from(model: &VelocityModel, cond: &Condition, cfg: &FlowConfig, x0: Tensor) -> Result<Tensor> {
    let x1 = euler_integrate(model, cond, cfg.nfe, cfg.cfg_scale, x0)?;
    unscale_latent(&x1, cfg.latent_scale)
}

/// Integrates the guided field from `t = 0` to `1` in `nfe` steps and returns
/// the flow-space state.
pub fn euler_integrate(model: &VelocityModel, cond: &Condition, nfe: usize, s: f64, mut x: Tensor) -> Result<Tensor> {
    if nfe == 0 {
        return arg_err("nfe must be >= 1");
    }
    let h = 1.0 / nfe as f64;
    for k in 0..nfe {
        let v = guided_velocity(model, &x, k as f64 * h, cond, s)?;
        x.add_scaled(&v, h)?;
        if !x.is_finite() {
            return Err(Error::Divergence {
                step: k,
                detail: "non-finite sampler state".into(),
            });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_grad, max_relative_error};
    use crate::numerics::rng::{seeded, uniform};

    fn toy_cfg() -> FlowConfig {
        FlowConfig {
            history: 2,
            horizon: 2,
            hidden: vec![7],
            time_embed: 4,
            traj_embed: 3,
            ..FlowConfig::default()
        }
    }

    fn toy_batch(model: &VelocityModel, b: usize, rng: &mut Rng) -> CfmBatch {
        let cond = Condition::new(
            normal_tensor(rng, &[b, model.history_len()]),
            normal_tensor(rng, &[b, model.history * TRAJ_FEATURES]),
        )
        .unwrap();
        CfmBatch::new(cond, normal_tensor(rng, &[b, model.state_len()])).unwrap()
    }

    #[test]
    fn rescale_examples() {
        let z = Tensor::from_vec(vec![0.02]);
        assert!((rescale_latent(&z, 10.0).unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert_eq!(rescale_latent(&z, 1.0).unwrap(), z);
        let r = normal_tensor(&mut seeded(1), &[20]);
        let back = unscale_latent(&rescale_latent(&r, 10.0).unwrap(), 10.0).unwrap();
        assert!(back.max_abs_diff(&r).unwrap() < 1e-15);
        assert!(rescale_latent(&z, 0.0).is_err());
    }

    #[test]
    fn path_examples() {
        let mut rng = seeded(2);
        let eps = normal_tensor(&mut rng, &[5]);
        let z = normal_tensor(&mut rng, &[5]);
        assert_eq!(interpolate_path(&eps, &z, 0.0, 10.0).unwrap(), eps);
        assert_eq!(interpolate_path(&eps, &z, 1.0, 10.0).unwrap(), z.scale(10.0));
        let v = interpolate_path(&Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![2.0]), 0.5, 10.0).unwrap();
        assert_eq!(v.data(), &[10.0]);
        assert!(interpolate_path(&eps, &z, 1.5, 1.0).is_err());
    }

    #[test]
    fn timestep_distribution() {
        assert_eq!(sigmoid(0.0), 0.5);
        let mut rng = seeded(3);
        let n = 1_000_000;
        let mut s = 0.0;
        for _ in 0..n {
            let t = sample_timestep(&mut rng);
            assert!(t > 0.0 && t < 1.0);
            s += t;
        }
        assert!((s / n as f64 - 0.5).abs() < 0.002);
    }

    #[test]
    fn dropout_rates() {
        let mut rng = seeded(4);
        let model = VelocityModel::init(3, &toy_cfg(), &mut rng).unwrap();
        let batch = toy_batch(&model, 6, &mut rng);
        assert_eq!(drop_condition(&batch, 0.0, &mut rng).unwrap(), batch);
        let all = drop_condition(&batch, 1.0, &mut rng).unwrap();
        assert!(all.condition.history.data().iter().all(|v| *v == 0.0));
        assert!(all.condition.dropped.iter().all(|d| *d));
        assert_eq!(all.future, batch.future);

        // chi-square on drop counts, 1 dof, alpha = 0.01 -> 6.635
        let n = 100_000;
        let cond = Condition::new(Tensor::zeros(&[n, 1]), Tensor::zeros(&[n, 0])).unwrap();
        let big = CfmBatch::new(cond, Tensor::zeros(&[n, 1])).unwrap();
        let out = drop_condition(&big, 0.25, &mut rng).unwrap();
        let k = out.condition.dropped.iter().filter(|d| **d).count() as f64;
        let rate = k / n as f64;
        assert!((rate - 0.25).abs() < 0.005);
        let e1 = 0.25 * n as f64;
        let e0 = 0.75 * n as f64;
        let chi2 = (k - e1).powi(2) / e1 + ((n as f64 - k) - e0).powi(2) / e0;
        assert!(chi2 < 6.635, "chi2 {chi2}");
    }

    #[test]
    fn joint_concat() {
        let mut rng = seeded(5);
        let h = normal_tensor(&mut rng, &[3, 2, 2, 4]);
        let f = normal_tensor(&mut rng, &[3, 2, 2, 4]);
        let j = concat_joint(&h, &f).unwrap();
        assert_eq!(j.shape(), &[6, 2, 2, 4]);
        assert_eq!(&j.data()[..h.len()], h.data());
        assert_eq!(&j.data()[h.len()..], f.data());
        let c = concat_joint_channels(&h, &f).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2, 8]);
        let h16 = Tensor::zeros(&[2, 4, 4, 16]);
        assert_eq!(concat_joint_channels(&h16, &h16).unwrap().shape()[3], 32);
        assert!(concat_joint(&h, &Tensor::zeros(&[3, 2, 2, 5])).is_err());
    }

    #[test]
    fn fuse_examples() {
        let a = Tensor::from_vec(vec![1.0, -3.0]);
        let b = Tensor::from_vec(vec![0.4, 2.0]);
        assert_eq!(cfg_fuse(&a, &b, 0.0).unwrap(), a);
        assert!((cfg_fuse(&a, &b, 2.0).unwrap().data()[0] - 2.2).abs() < 1e-15);
        assert_eq!(cfg_fuse(&a, &a, 7.0).unwrap(), a);
        let d = 0.37;
        let shifted = cfg_fuse(&a.map(|v| v + d), &b.map(|v| v + d), 2.0).unwrap();
        let base = cfg_fuse(&a, &b, 2.0).unwrap().map(|v| v + d);
        assert!(shifted.max_abs_diff(&base).unwrap() < 1e-14);
        assert!(cfg_fuse(&a, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    fn zero_model(model: &mut VelocityModel) {
        for p in model.params_mut(ParamScope::All) {
            p.fill(0.0);
        }
    }

    #[test]
    fn loss_closed_forms() {
        let mut rng = seeded(6);
        let mut model = VelocityModel::init(3, &toy_cfg(), &mut rng).unwrap();
        zero_model(&mut model);
        let batch = toy_batch(&model, 4, &mut rng);
        let eps = Tensor::zeros(batch.future.shape());
        let t = [0.3, 0.5, 0.9, 0.1];
        let out = cfm_loss_with(&model, &batch, &t, &eps).unwrap();
        let want = batch.future.norm_sq() / 4.0;
        assert!((out.loss - want).abs() < 1e-12);

        // output bias equal to the target on a single sample
        let b1 = CfmBatch::new(batch.condition.select(&[0]).unwrap(), select_rows(&batch.future, &[0]).unwrap()).unwrap();
        let last = model.backbone.layers.len() - 1;
        model.backbone.layers[last].bias = Tensor::from_vec(b1.future.row(0).to_vec());
        let out = cfm_loss_with(&model, &b1, &[0.4], &Tensor::zeros(b1.future.shape())).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = seeded(40 + seed);
            let mut model = VelocityModel::init(3, &toy_cfg(), &mut rng).unwrap();
            let mut batch = toy_batch(&model, 4, &mut rng);
            batch.condition.dropped[1] = true;
            let t: Vec<f64> = (0..4).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
            let eps = normal_tensor(&mut rng, batch.future.shape());
            for lora in [false, true] {
                if lora {
                    model.attach_lora(2, 4.0, &mut rng).unwrap();
                    // move B off zero so adapter gradients are exercised
                    for l in &mut model.backbone.layers {
                        let ad = l.lora.as_mut().unwrap();
                        ad.b = normal_tensor(&mut rng, ad.b.shape()).scale(0.1);
                    }
                }
                let scope = if lora { ParamScope::Adapters } else { ParamScope::All };
                let analytic = cfm_loss_with(&model, &batch, &t, &eps).unwrap().grads.into_tensors(scope);
                let n = model.params(scope).len();
                assert_eq!(analytic.len(), n);
                for k in 0..n {
                    let base = model.params(scope)[k].clone();
                    let fd = finite_diff_grad(
                        |p| {
                            let mut m = model.clone();
                            *m.params_mut(scope)[k] = p.clone();
                            cfm_loss_with(&m, &batch, &t, &eps).unwrap().loss
                        },
                        &base,
                        1e-5,
                    )
                    .unwrap();
                    let err = max_relative_error(&analytic[k], &fd, 1e-6);
                    assert!(err < 1e-4, "seed {seed} lora {lora} param {k}: {err}");
                }
            }
        }
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let mut rng = seeded(8);
        let model = VelocityModel::init(3, &toy_cfg(), &mut rng).unwrap();
        let batch = toy_batch(&model, 2, &mut rng);
        let x = normal_tensor(&mut rng, batch.future.shape());
        let v = normal_tensor(&mut rng, batch.future.shape());
        let t = [0.2, 0.7];
        let g = model.input_vjp(&x, &t, &batch.condition, &v).unwrap();
        let fd = finite_diff_grad(
            |xx| model.forward(xx, &t, &batch.condition).unwrap().dot(&v).unwrap(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn constant_field_euler_is_exact() {
        let mut rng = seeded(9);
        let mut model = VelocityModel::init(2, &toy_cfg(), &mut rng).unwrap();
        zero_model(&mut model);
        let c = vec![0.5, -1.0, 2.0, 0.25];
        let last = model.backbone.layers.len() - 1;
        model.backbone.layers[last].bias = Tensor::from_vec(c.clone());
        let cond = toy_batch(&model, 3, &mut rng).condition;
        for nfe in [1, 3, 10] {
            let x0 = normal_tensor(&mut rng, &[3, 4]);
            let x1 = euler_integrate(&model, &cond, nfe, 0.0, x0.clone()).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    assert!((x1.get2(i, j) - (x0.get2(i, j) + c[j])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_guidance_equals_conditional_sampler() {
        let mut rng = seeded(10);
        let model = VelocityModel::init(3, &toy_cfg(), &mut rng).unwrap();
        let cond = toy_batch(&model, 3, &mut rng).condition;
        let cfg = FlowConfig { cfg_scale: 0.0, nfe: 7, ..toy_cfg() };
        let a = euler_sample(&model, &cond, &cfg, &mut seeded(77)).unwrap();
        // conditional-only reference loop
        let mut x = normal_tensor(&mut seeded(77), &[3, model.state_len()]);
        for k in 0..7 {
            let v = model.forward(&x, &[k as f64 / 7.0; 3], &cond).unwrap();
            x.add_scaled(&v, 1.0 / 7.0).unwrap();
        }
        let b = x.map(|v| v / cfg.latent_scale);
        assert_eq!(a, b);
        assert_eq!(euler_sample(&model, &cond, &cfg, &mut seeded(77)).unwrap(), a);
    }

    #[test]
    fn lora_zero_b_keeps_outputs() {
        let mut rng = seeded(11);
        let mut model = VelocityModel::init(3, &toy_cfg(), &mut rng).unwrap();
        let batch = toy_batch(&model, 3, &mut rng);
        let x = normal_tensor(&mut rng, batch.future.shape());
        let before = model.forward(&x, &[0.1, 0.5, 0.9], &batch.condition).unwrap();
        model.attach_lora(2, 16.0, &mut rng).unwrap();
        assert_eq!(model.forward(&x, &[0.1, 0.5, 0.9], &batch.condition).unwrap(), before);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = seeded(12);
        let mut model = VelocityModel::init(2, &toy_cfg(), &mut rng).unwrap();
        let last = model.backbone.layers.len() - 1;
        model.backbone.layers[last].bias.fill(f64::INFINITY);
        let cond = toy_batch(&model, 1, &mut rng).condition;
        let err = euler_integrate(&model, &cond, 4, 0.0, Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }
}
