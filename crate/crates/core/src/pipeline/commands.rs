//! The experiment commands: pretrain, align, fine-tune, sample, likelihood,
//! evaluation and the transfer study.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{check_fraction, ExperimentConfig, Strategy};
use super::data::{all_frames, dense_partner, domain_clip, source_pool, validation_pool};
use super::model::{train_flow, train_vae, Forecast, LoraSpec, Phase, TrainLog, WorldModel};
use super::report::{mean_std, Report, REGION_ALL};
use crate::cfm::VelocityModel;
use crate::error::{arg_err, Error, Result};
use crate::likelihood::Divergence;
use crate::metrics::region::grid_region_features;
use crate::metrics::{
    cka, cknna, class_variance, frechet_distance, gaussian_sym_kl, gaussian_w2, grid_features, kid, mean_cosine,
    sequence_frechet, FeatureSet, Pooling, RegionBinning,
};
use crate::numerics::mlp::ParamScope;
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::Tensor;
use crate::occupancy::{iou, miou, split_fraction, Domain, OccupancyGrid, SequenceClip};
use crate::vae::{VaeModel, VaeMode, VaeTrainConfig};

/// Stream tags for [`derive_seed`]; each consumer of randomness gets its own.
mod tag {
    pub const VAE_INIT: u64 = 1;
    pub const VAE_TRAIN: u64 = 2;
    pub const FLOW_INIT: u64 = 3;
    pub const FLOW_TRAIN: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const ALIGN_INIT: u64 = 6;
    pub const ALIGN_TRAIN: u64 = 7;
    pub const SCRATCH_VAE_INIT: u64 = 8;
    pub const SCRATCH_VAE_TRAIN: u64 = 9;
    pub const SCRATCH_FLOW_INIT: u64 = 10;
    pub const LORA_INIT: u64 = 11;
    pub const FINETUNE: u64 = 12;
    pub const SAMPLE: u64 = 13;
    pub const NLL: u64 = 14;
}

pub const KIND_PRETRAIN: &str = "pretrain";
pub const KIND_ALIGN: &str = "align";
pub const KIND_FINETUNE: &str = "finetune";

fn phase_vae(cfg: &ExperimentConfig, steps: u64) -> Phase {
    Phase {
        steps,
        lr: cfg.optim.vae_lr,
        warmup: cfg.optim.warmup_steps,
        batch: cfg.optim.vae_batch,
    }
}

fn phase_flow(cfg: &ExperimentConfig, steps: u64, lr: f64) -> Phase {
    Phase {
        steps,
        lr,
        warmup: cfg.optim.warmup_steps,
        batch: cfg.optim.flow_batch,
    }
}

fn refs(clips: &[SequenceClip]) -> Vec<&SequenceClip> {
    clips.iter().collect()
}

/// Trains the source compressor, then the flow on its frozen posterior means.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<(WorldModel, BTreeMap<String, TrainLog>)> {
    cfg.validate()?;
    let clips = source_pool(cfg)?;
    let mut model = WorldModel::init(
        cfg,
        cfg.source,
        &mut seeded(derive_seed(seed, tag::VAE_INIT)),
        &mut seeded(derive_seed(seed, tag::FLOW_INIT)),
    )?;
    let tcfg = VaeTrainConfig {
        mode: VaeMode::Pretrain,
        ..cfg.vae_train
    };
    let frames = all_frames(&clips);
    let t0 = Instant::now();
    let vae_log = train_vae(
        &mut model.vae,
        &frames,
        None,
        &tcfg,
        phase_vae(cfg, cfg.budget.pretrain_vae_steps),
        cfg.optim.vae_beta1,
        &mut seeded(derive_seed(seed, tag::VAE_TRAIN)),
    )?;
    log::info!("pretrain vae: {} steps, {:.1}s", cfg.budget.pretrain_vae_steps, t0.elapsed().as_secs_f64());
    if let Some(target) = cfg.latent_std {
        model.flow_cfg.latent_scale = calibrated_scale(&model.vae, &frames, target)?;
    }
    let data = model.encode_windows(&refs(&clips))?;
    let t0 = Instant::now();
    let flow_log = train_flow(
        &mut model.flow,
        &mut model.ema,
        &data,
        &model.flow_cfg,
        ParamScope::All,
        phase_flow(cfg, cfg.budget.pretrain_flow_steps, cfg.optim.flow_lr),
        &mut seeded(derive_seed(seed, tag::FLOW_TRAIN)),
    )?;
    log::info!("pretrain flow: {} steps, {:.1}s", cfg.budget.pretrain_flow_steps, t0.elapsed().as_secs_f64());
    let mut logs = BTreeMap::new();
    logs.insert("vae".to_string(), vae_log);
    logs.insert("flow".to_string(), flow_log);
    Ok((model, logs))
}

/// Scale taking the posterior means of `frames` to population std `target`.
pub fn calibrated_scale(vae: &VaeModel, frames: &[&OccupancyGrid], target: f64) -> Result<f64> {
    let (mu, _) = vae.encode_batch(frames)?;
    let (mean, _) = mean_std(mu.data());
    let var = mu.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mu.len() as f64;
    if !(var > 0.0) {
        return Err(Error::Training {
            step: 0,
            detail: "posterior means are constant; cannot calibrate the latent scale".into(),
        });
    }
    Ok(target / var.sqrt())
}

fn step_counts(logs: &BTreeMap<String, TrainLog>) -> BTreeMap<String, u64> {
    logs.iter().map(|(k, v)| (k.clone(), v.losses.len() as u64)).collect()
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<Checkpoint> {
    let (model, logs) = pretrain(cfg, seed)?;
    model.to_checkpoint(KIND_PRETRAIN, &cfg.hash(), seed, step_counts(&logs))
}

/// Loads a pretrained checkpoint written under `cfg`.
pub fn load_pretrained(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<WorldModel> {
    if ck.manifest.kind != KIND_PRETRAIN {
        return Err(Error::Config(format!("expected a {KIND_PRETRAIN} checkpoint, got {:?}", ck.manifest.kind)));
    }
    let m = WorldModel::from_checkpoint(ck)?;
    if m.domain != cfg.source || m.lora.is_some() {
        return Err(Error::Config(format!("checkpoint holds a {} model, not the {} source model", m.domain.name(), cfg.source.name())));
    }
    let f = &m.flow_cfg;
    if m.vae.config != cfg.vae_config(cfg.source)
        || f.history != cfg.flow.history
        || f.horizon != cfg.flow.horizon
        || f.hidden != cfg.flow.hidden
        || f.time_embed != cfg.flow.time_embed
        || f.traj_embed != cfg.flow.traj_embed
    {
        return Err(Error::Config("checkpoint architecture differs from the config".into()));
    }
    Ok(m)
}

/// Target-pool clip ids kept at `fraction`; prefixes nest across fractions.
pub fn train_ids(cfg: &ExperimentConfig, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let f = check_fraction(fraction)?;
    let ids: Vec<usize> = (0..cfg.data.target_clips).collect();
    Ok(split_fraction(&ids, f, derive_seed(seed, tag::SPLIT))?.train)
}

/// Target-domain compressors of one `(domain, fraction, seed)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVaes {
    /// Aligned to (semantic) or continued from (otherwise) the pretrained VAE.
    pub adapted: VaeModel,
    /// Trained from random init on the same frames and steps, no alignment.
    pub scratch: VaeModel,
    pub adapted_log: TrainLog,
    pub scratch_log: TrainLog,
}

/// Adapts the pretrained compressor to `domain`. Semantic frames get a fresh
/// VAE whose latents are pulled toward the pretrained posterior means of
/// their geometry partners; other domains continue the pretrained weights.
pub fn align_vae(
    cfg: &ExperimentConfig,
    pretrained: &VaeModel,
    domain: Domain,
    clips: &[&SequenceClip],
    seed: u64,
) -> Result<(VaeModel, TrainLog)> {
    let frames: Vec<&OccupancyGrid> = clips.iter().flat_map(|c| c.frames().iter()).collect();
    let phase = phase_vae(cfg, cfg.budget.align_steps);
    let mut rng = seeded(derive_seed(seed, tag::ALIGN_TRAIN));
    if domain == Domain::Semantic {
        let targets = frames
            .iter()
            .map(|g| pretrained.encode(&dense_partner(g)).map(|(mu, _)| mu))
            .collect::<Result<Vec<_>>>()?;
        let mut vae = VaeModel::init(cfg.vae_config(domain), &mut seeded(derive_seed(seed, tag::ALIGN_INIT)))?;
        let tcfg = VaeTrainConfig {
            mode: VaeMode::FinetuneAligned,
            ..cfg.vae_train
        };
        let log = train_vae(&mut vae, &frames, Some(&targets), &tcfg, phase, cfg.optim.vae_beta1, &mut rng)?;
        Ok((vae, log))
    } else {
        if pretrained.config != cfg.vae_config(domain) {
            return Err(Error::Config(format!(
                "{} frames do not fit the pretrained compressor; only the semantic target gets a new VAE",
                domain.name()
            )));
        }
        let mut vae = pretrained.clone();
        let tcfg = VaeTrainConfig {
            mode: VaeMode::Pretrain,
            kappa: 0.0,
            ..cfg.vae_train
        };
        let log = train_vae(&mut vae, &frames, None, &tcfg, phase, cfg.optim.vae_beta1, &mut rng)?;
        Ok((vae, log))
    }
}

/// Compressor trained from random init with no alignment term.
pub fn scratch_vae(cfg: &ExperimentConfig, domain: Domain, clips: &[&SequenceClip], seed: u64) -> Result<(VaeModel, TrainLog)> {
    let frames: Vec<&OccupancyGrid> = clips.iter().flat_map(|c| c.frames().iter()).collect();
    let mut vae = VaeModel::init(cfg.vae_config(domain), &mut seeded(derive_seed(seed, tag::SCRATCH_VAE_INIT)))?;
    let tcfg = VaeTrainConfig {
        mode: VaeMode::Pretrain,
        kappa: 0.0,
        ..cfg.vae_train
    };
    let log = train_vae(
        &mut vae,
        &frames,
        None,
        &tcfg,
        phase_vae(cfg, cfg.budget.align_steps),
        cfg.optim.vae_beta1,
        &mut seeded(derive_seed(seed, tag::SCRATCH_VAE_TRAIN)),
    )?;
    Ok((vae, log))
}

pub fn target_vaes(cfg: &ExperimentConfig, pretrained: &WorldModel, domain: Domain, clips: &[&SequenceClip], seed: u64) -> Result<TargetVaes> {
    let (adapted, adapted_log) = align_vae(cfg, &pretrained.vae, domain, clips, seed)?;
    let (scratch, scratch_log) = scratch_vae(cfg, domain, clips, seed)?;
    Ok(TargetVaes {
        adapted,
        scratch,
        adapted_log,
        scratch_log,
    })
}

/// Training clips of `domain` at `fraction`, drawn from the target pool.
pub fn fraction_clips(cfg: &ExperimentConfig, domain: Domain, fraction: f64, seed: u64) -> Result<Vec<SequenceClip>> {
    train_ids(cfg, fraction, seed)?
        .into_iter()
        .map(|i| domain_clip(cfg, domain, cfg.data.target_seed_offset + i as u64))
        .collect()
}

/// Latent pairing metrics of `vae` on `frames` against the pretrained
/// posterior of their geometry partners.
pub fn alignment_metrics(
    cfg: &ExperimentConfig,
    vae: &VaeModel,
    pretrained: &VaeModel,
    frames: &[&OccupancyGrid],
) -> Result<BTreeMap<&'static str, f64>> {
    let dense: Vec<OccupancyGrid> = frames.iter().map(|g| dense_partner(g)).collect();
    let dense_refs: Vec<&OccupancyGrid> = dense.iter().collect();
    let (mu_a, ls_a) = vae.encode_batch(frames)?;
    let (mu_d, ls_d) = pretrained.encode_batch(&dense_refs)?;
    let (sa, sd) = (ls_a.map(f64::exp), ls_d.map(f64::exp));
    let n = frames.len();
    let l = mu_a.len() / n;
    let fa = mu_a.clone().reshape(vec![n, l])?;
    let fd = mu_d.clone().reshape(vec![n, l])?;
    let mut out = BTreeMap::new();
    out.insert("cosine", mean_cosine(&mu_a, &mu_d)?.0);
    out.insert("cka", cka(&fa, &fd, cfg.eval.sigma)?);
    out.insert("cknna", cknna(&fa, &fd, cfg.eval.cknna_k.min(n - 1), cfg.eval.sigma)?);
    out.insert("sym_kl", gaussian_sym_kl(&mu_a, &sa, &mu_d, &sd)?);
    out.insert("w2", gaussian_w2(&mu_a, &sa, &mu_d, &sd)? / (n as f64).sqrt());
    Ok(out)
}

/// Aligns the compressor for `cfg.target`, scores it and the unaligned
/// scratch baseline on held-out pairs, and packs the aligned VAE with the
/// pretrained flow.
pub fn cmd_align_vae(cfg: &ExperimentConfig, pretrained: &Checkpoint, fraction: f64, seed: u64) -> Result<(Checkpoint, Report)> {
    let base = load_pretrained(cfg, pretrained)?;
    let clips = fraction_clips(cfg, cfg.target, fraction, seed)?;
    let t0 = Instant::now();
    let vaes = target_vaes(cfg, &base, cfg.target, &refs(&clips), seed)?;
    let runtime = t0.elapsed().as_secs_f64();
    let val = validation_pool(cfg, cfg.target)?;
    let frames = all_frames(&val);
    let hash = cfg.hash();
    let mut report = Report::new("align", &hash);
    for (suffix, vae) in [("", &vaes.adapted), ("_baseline", &vaes.scratch)] {
        for (k, v) in alignment_metrics(cfg, vae, &base.vae, &frames)? {
            report.push(&format!("{k}{suffix}"), None, REGION_ALL, v, seed);
        }
    }
    let recon = crate::vae::reconstruction_iou(&vaes.adapted, &frames)?;
    report.push("recon_iou", None, REGION_ALL, recon, seed);
    report.push("recon_iou_baseline", None, REGION_ALL, crate::vae::reconstruction_iou(&vaes.scratch, &frames)?, seed);
    report.note("domain", cfg.target);
    report.note("fraction", fraction);
    report.note("train_clips", clips.len());
    report.note("align_steps", cfg.budget.align_steps);
    report.note("kappa", cfg.vae_train.kappa);
    report.note("sigma", cfg.eval.sigma.map_or("median".to_string(), |s| s.to_string()));
    report.note("cknna_k", cfg.eval.cknna_k);
    report.note("w2_convention", "parameter-level diagonal Gaussian W2, divided by sqrt(frames)");
    report.note("runtime_s", runtime);
    let mut model = base;
    model.domain = cfg.target;
    model.vae = vaes.adapted;
    let mut steps = BTreeMap::new();
    steps.insert("align".to_string(), vaes.adapted_log.losses.len() as u64);
    let ck = model.to_checkpoint(KIND_ALIGN, &hash, seed, steps)?;
    Ok((ck, report))
}

/// Builds and trains the target model of one strategy. The VAE phase has
/// already run inside `vaes`; the flow phase runs `finetune_steps`.
pub fn finetune(
    cfg: &ExperimentConfig,
    pretrained: &WorldModel,
    vaes: &TargetVaes,
    strategy: Strategy,
    domain: Domain,
    clips: &[&SequenceClip],
    seed: u64,
) -> Result<(WorldModel, TrainLog)> {
    let vae = if strategy.uses_adapted_vae() { vaes.adapted.clone() } else { vaes.scratch.clone() };
    let mut flow_cfg = pretrained.flow_cfg.clone();
    let (flow, lr) = if strategy.uses_pretrained_flow() {
        (pretrained.flow.clone(), cfg.optim.finetune_lr)
    } else {
        flow_cfg = cfg.flow.clone();
        if let Some(target) = cfg.latent_std {
            let frames: Vec<&OccupancyGrid> = clips.iter().flat_map(|c| c.frames().iter()).collect();
            flow_cfg.latent_scale = calibrated_scale(&vae, &frames, target)?;
        }
        let f = VelocityModel::init(cfg.frame_len(), &flow_cfg, &mut seeded(derive_seed(seed, tag::SCRATCH_FLOW_INIT)))?;
        (f, cfg.optim.flow_lr)
    };
    let mut model = WorldModel::new(vae, flow, flow_cfg, domain, cfg.optim.ema_decay)?;
    let scope = if strategy == Strategy::Lora {
        let spec = LoraSpec {
            rank: cfg.optim.lora_rank,
            alpha: cfg.optim.lora_alpha,
        };
        model.attach_lora(spec, &mut seeded(derive_seed(seed, tag::LORA_INIT)))?;
        ParamScope::Adapters
    } else {
        ParamScope::All
    };
    let data = model.encode_windows(clips)?;
    let log = train_flow(
        &mut model.flow,
        &mut model.ema,
        &data,
        &model.flow_cfg,
        scope,
        phase_flow(cfg, cfg.budget.finetune_steps, lr),
        &mut seeded(derive_seed(seed, tag::FINETUNE)),
    )?;
    Ok((model, log))
}

/// Fine-tunes the pretrained model on `cfg.target` with `strategy`.
pub fn cmd_finetune(cfg: &ExperimentConfig, pretrained: &Checkpoint, strategy: Strategy, fraction: f64, seed: u64) -> Result<Checkpoint> {
    let base = load_pretrained(cfg, pretrained)?;
    let clips = fraction_clips(cfg, cfg.target, fraction, seed)?;
    let vaes = target_vaes(cfg, &base, cfg.target, &refs(&clips), seed)?;
    let (model, log) = finetune(cfg, &base, &vaes, strategy, cfg.target, &refs(&clips), seed)?;
    let mut steps = BTreeMap::new();
    let vae_steps = if strategy.uses_adapted_vae() { &vaes.adapted_log } else { &vaes.scratch_log };
    steps.insert("vae".to_string(), vae_steps.losses.len() as u64);
    steps.insert("flow".to_string(), log.losses.len() as u64);
    model.to_checkpoint(KIND_FINETUNE, &cfg.hash(), seed, steps)
}

/// Forecast of one clip with EMA weights.
pub fn cmd_sample(model: &WorldModel, clip: &SequenceClip, nfe: usize, cfg_scale: f64, seed: u64) -> Result<Forecast> {
    let mut rng = seeded(derive_seed(seed, tag::SAMPLE));
    Ok(model.forecast(&[clip], nfe, cfg_scale, &mut rng)?.remove(0))
}

/// Per-clip bits/dim of future latents for every probe seed, plus the mean
/// over clips per seed.
pub fn cmd_nll(cfg: &ExperimentConfig, model: &WorldModel, clips: &[&SequenceClip], seeds: &[u64]) -> Result<Report> {
    if clips.is_empty() {
        return arg_err("no clips to score");
    }
    let div = match cfg.likelihood.n_probes {
        0 => Divergence::Exact,
        n => Divergence::Hutchinson { n_probes: n },
    };
    let mut report = Report::new("nll", &cfg.hash());
    for &s in seeds {
        let mut rng = seeded(derive_seed(s, tag::NLL));
        let mut bpds = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let lp = model.log_prob(clip, model.flow_cfg.cfg_scale, &cfg.ode, div, &mut rng)?;
            report.push("bpd", None, &format!("clip{i}"), lp.bpd(), s);
            bpds.push(lp.bpd());
        }
        let (mean, std) = mean_std(&bpds);
        report.push("bpd_mean", None, REGION_ALL, mean, s);
        report.push("bpd_std_clips", None, REGION_ALL, std, s);
    }
    report.note("divergence", format!("{div:?}"));
    report.note("ode", &cfg.ode);
    report.note("cfg_scale", model.flow_cfg.cfg_scale);
    report.note("seeds", seeds);
    report.note("latent_scale", model.flow_cfg.latent_scale);
    Ok(report)
}

/// Anything that predicts the future frames of a clip from its history.
pub trait Forecaster {
    fn history(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Predicted frames per clip, `horizon` each.
    fn forecast(&self, clips: &[&SequenceClip], seed: u64) -> Result<Vec<Vec<OccupancyGrid>>>;
}

/// The world model sampled with fixed solver settings.
#[derive(Debug, Clone)]
pub struct ModelForecaster<'a> {
    pub model: &'a WorldModel,
    pub nfe: usize,
    pub cfg_scale: f64,
}

impl Forecaster for ModelForecaster<'_> {
    fn history(&self) -> usize {
        self.model.flow_cfg.history
    }

    fn horizon(&self) -> usize {
        self.model.flow_cfg.horizon
    }

    fn forecast(&self, clips: &[&SequenceClip], seed: u64) -> Result<Vec<Vec<OccupancyGrid>>> {
        let mut rng = seeded(derive_seed(seed, tag::SAMPLE));
        Ok(self.model.forecast(clips, self.nfe, self.cfg_scale, &mut rng)?.into_iter().map(|f| f.frames).collect())
    }
}

/// Returns the ground-truth future.
#[derive(Debug, Clone, Copy)]
pub struct OracleForecaster {
    pub history: usize,
    pub horizon: usize,
}

impl Forecaster for OracleForecaster {
    fn history(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast(&self, clips: &[&SequenceClip], _seed: u64) -> Result<Vec<Vec<OccupancyGrid>>> {
        Ok(clips.iter().map(|c| c.frames()[self.history..self.history + self.horizon].to_vec()).collect())
    }
}

/// Metrics emitted per horizon; region metrics add one row per bin.
pub const EVAL_METRICS: [&str; 9] = ["iou", "miou", "fid", "kid", "cka", "cknna", "class_variance", "class_variance_gt", "seq_frechet"];
pub const REGION_METRICS: [&str; 2] = ["fid_r", "kid_r"];

/// Region layout for grids of `cfg`: the configured extent, else half the
/// smaller horizontal grid extent.
pub fn region_binning(cfg: &ExperimentConfig) -> Result<RegionBinning> {
    let extent = cfg.eval.region_extent.unwrap_or_else(|| {
        let d = cfg.model_dims();
        d[0].min(d[1]) as f64 * cfg.scene.resolution as f64 / 2.0
    });
    RegionBinning::scaled_to(extent)
}

fn or_nan(name: &str, r: Result<f64>) -> f64 {
    r.unwrap_or_else(|e| {
        log::warn!("{name} undefined: {e}");
        f64::NAN
    })
}

/// Rows per sampling seed: `horizon * (EVAL_METRICS + 2 * bins)`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, forecaster: &dyn Forecaster, clips: &[&SequenceClip], seeds: &[u64]) -> Result<Report> {
    if clips.is_empty() {
        return arg_err("empty validation set");
    }
    let (hist, hor) = (forecaster.history(), forecaster.horizon());
    if let Some(c) = clips.iter().find(|c| c.len() < hist + hor) {
        return arg_err(format!("validation clip of {} frames, need {}", c.len(), hist + hor));
    }
    let binning = region_binning(cfg)?;
    let pool = cfg.eval.feature_pool;
    let n_classes = clips[0].frames()[0].n_classes() as usize;
    let k = cfg.eval.cknna_k.min(clips.len().saturating_sub(1)).max(1);
    let gt_frames = |h: usize| -> Vec<&OccupancyGrid> { clips.iter().map(|c| &c.frames()[hist + h]).collect() };
    let mut report = Report::new("eval", &cfg.hash());
    let t0 = Instant::now();
    for &seed in seeds {
        let pred = forecaster.forecast(clips, seed)?;
        for h in 0..hor {
            let gt = gt_frames(h);
            let pr: Vec<&OccupancyGrid> = pred.iter().map(|p| &p[h]).collect();
            let hz = Some(h + 1);
            let mut ious = Vec::with_capacity(clips.len());
            let mut mious = Vec::with_capacity(clips.len());
            for (p, g) in pr.iter().zip(&gt) {
                ious.push(iou(p, g)?);
                mious.push(miou(p, g, n_classes)?.mean);
            }
            report.push("iou", hz, REGION_ALL, mean_std(&ious).0, seed);
            report.push("miou", hz, REGION_ALL, mean_std(&mious).0, seed);
            let feats = |gs: &[&OccupancyGrid], tag: &str| -> Result<FeatureSet> {
                let rows = gs.iter().map(|g| grid_features(g, pool)).collect::<Result<Vec<_>>>()?;
                FeatureSet::from_rows(&rows, tag)
            };
            let (fp, fg) = (feats(&pr, "forecast")?, feats(&gt, "truth")?);
            report.push("fid", hz, REGION_ALL, or_nan("fid", frechet_distance(&fp, &fg)), seed);
            report.push("kid", hz, REGION_ALL, or_nan("kid", kid(&fp, &fg, cfg.eval.sigma).map(|r| r.0)), seed);
            report.push("cka", hz, REGION_ALL, or_nan("cka", cka(&fp.data, &fg.data, cfg.eval.sigma)), seed);
            report.push("cknna", hz, REGION_ALL, or_nan("cknna", cknna(&fp.data, &fg.data, k, cfg.eval.sigma)), seed);
            report.push("class_variance", hz, REGION_ALL, class_variance(&pr, n_classes)?, seed);
            report.push("class_variance_gt", hz, REGION_ALL, class_variance(&gt, n_classes)?, seed);
            let cp = prefix_features(clips.len(), h, pool, |i, j| &pred[i][j])?;
            let cg = prefix_features(clips.len(), h, pool, |i, j| &clips[i].frames()[hist + j])?;
            report.push("seq_frechet", hz, REGION_ALL, or_nan("seq_frechet", sequence_frechet(&cp, &cg, Pooling::Mean)), seed);
            let rp = pr.iter().map(|g| grid_region_features(g, &binning)).collect::<Result<Vec<_>>>()?;
            let rg = gt.iter().map(|g| grid_region_features(g, &binning)).collect::<Result<Vec<_>>>()?;
            let d = rp[0].vector.len() / binning.n_bins();
            for b in 0..binning.n_bins() {
                let bin_set = |r: &[crate::metrics::RegionFeatures], tag: &str| {
                    let rows: Vec<Vec<f64>> = r.iter().map(|f| f.vector[b * d..(b + 1) * d].to_vec()).collect();
                    FeatureSet::from_rows(&rows, tag)
                };
                let (bp, bg) = (bin_set(&rp, "forecast")?, bin_set(&rg, "truth")?);
                let region = format!("bin{b}");
                report.push("fid_r", hz, &region, or_nan("fid_r", frechet_distance(&bp, &bg)), seed);
                report.push("kid_r", hz, &region, or_nan("kid_r", kid(&bp, &bg, cfg.eval.sigma).map(|r| r.0)), seed);
            }
        }
    }
    report.note("sigma", cfg.eval.sigma.map_or("median".to_string(), |s| s.to_string()));
    report.note("cknna_k", k);
    report.note("bin_edges_m", &binning.edges);
    report.note("cell_size_m", binning.cell_size);
    report.note("feature_pool", pool);
    report.note("seeds", seeds);
    report.note("clips", clips.len());
    report.note("runtime_s", t0.elapsed().as_secs_f64());
    Ok(report)
}

/// Clip features over forecast steps `0..=h`, one `(h + 1, dim)` tensor per clip.
fn prefix_features<'a>(n: usize, h: usize, pool: usize, frame: impl Fn(usize, usize) -> &'a OccupancyGrid) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| {
            let rows = (0..=h).map(|j| grid_features(frame(i, j), pool)).collect::<Result<Vec<_>>>()?;
            Tensor::from_rows(&rows)
        })
        .collect()
}

/// Mean IoU per horizon for each solver step count.
pub fn nfe_sweep(cfg: &ExperimentConfig, model: &WorldModel, clips: &[&SequenceClip], cfg_scale: f64, seed: u64) -> Result<Report> {
    let mut report = Report::new("nfe_sweep", &cfg.hash());
    for &nfe in &cfg.eval.nfe_sweep {
        let f = ModelForecaster { model, nfe, cfg_scale };
        let pred = f.forecast(clips, seed)?;
        for h in 0..f.horizon() {
            let mut ious = Vec::with_capacity(clips.len());
            for (p, c) in pred.iter().zip(clips) {
                ious.push(iou(&p[h], &c.frames()[f.history() + h])?);
            }
            report.push("iou", Some(h + 1), &format!("nfe{nfe}"), mean_std(&ious).0, seed);
        }
    }
    report.note("cfg_scale", cfg_scale);
    Ok(report)
}

/// Win/loss of one strategy against scratch in one study cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub domain: Domain,
    pub strategy: Strategy,
    pub fraction: f64,
    pub horizon: usize,
    pub wins: usize,
    pub seeds: usize,
    /// Mean of `miou(strategy) - miou(scratch)` over seeds.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub report: Report,
    pub cells: Vec<StudyCell>,
}

impl StudyResult {
    pub fn cell(&self, domain: Domain, strategy: Strategy, fraction: f64, horizon: usize) -> Option<&StudyCell> {
        self.cells
            .iter()
            .find(|c| c.domain == domain && c.strategy == strategy && (c.fraction - fraction).abs() < 1e-9 && c.horizon == horizon)
    }
}

/// Runs every (domain, fraction, seed, strategy) of the study grid from one
/// pretrained model and compares each strategy's held-out mIoU with scratch.
pub fn cmd_transfer_study(cfg: &ExperimentConfig, pretrained: &WorldModel) -> Result<StudyResult> {
    cfg.validate()?;
    let st = &cfg.study;
    if !st.strategies.contains(&Strategy::Scratch) {
        return Err(Error::Config("the study needs the scratch strategy as reference".into()));
    }
    let hash = cfg.hash();
    let mut report = Report::new("study", &hash);
    let hor = cfg.flow.horizon;
    // miou[(domain, strategy, fraction index, horizon)] per seed
    let mut scores: BTreeMap<(Domain, Strategy, usize, usize), Vec<f64>> = BTreeMap::new();
    let mut budgets: Vec<BTreeMap<String, u64>> = Vec::new();
    let mut runtimes = serde_json::Map::new();
    for &domain in &st.domains {
        let val = validation_pool(cfg, domain)?;
        let val_refs = refs(&val);
        for (fi, &fraction) in st.fractions.iter().enumerate() {
            for &seed in &cfg.seeds {
                let clips = fraction_clips(cfg, domain, fraction, seed)?;
                let t0 = Instant::now();
                let vaes = target_vaes(cfg, pretrained, domain, &refs(&clips), seed)?;
                let vae_time = t0.elapsed().as_secs_f64();
                for &strategy in &st.strategies {
                    let t1 = Instant::now();
                    let (model, log) = finetune(cfg, pretrained, &vaes, strategy, domain, &refs(&clips), seed)?;
                    let vae_log = if strategy.uses_adapted_vae() { &vaes.adapted_log } else { &vaes.scratch_log };
                    let mut b = BTreeMap::new();
                    b.insert("vae".to_string(), vae_log.losses.len() as u64);
                    b.insert("flow".to_string(), log.losses.len() as u64);
                    budgets.push(b);
                    let f = ModelForecaster {
                        model: &model,
                        nfe: cfg.flow.nfe,
                        cfg_scale: cfg.flow.cfg_scale,
                    };
                    let pred = f.forecast(&val_refs, seed)?;
                    let n_classes = val[0].frames()[0].n_classes() as usize;
                    for h in 0..hor {
                        let mut m = Vec::with_capacity(val.len());
                        for (p, c) in pred.iter().zip(&val) {
                            m.push(miou(&p[h], &c.frames()[cfg.flow.history + h], n_classes)?.mean);
                        }
                        let v = mean_std(&m).0;
                        let region = format!("{}/{}/{}", domain.name(), strategy.name(), fraction);
                        report.push("miou", Some(h + 1), &region, v, seed);
                        scores.entry((domain, strategy, fi, h)).or_default().push(v);
                    }
                    let key = format!("{}/{}/{}/{}", domain.name(), strategy.name(), fraction, seed);
                    runtimes.insert(key, serde_json::json!(vae_time + t1.elapsed().as_secs_f64()));
                    log::info!("study {} {} f={fraction} seed={seed}: {:.1}s", domain.name(), strategy.name(), t1.elapsed().as_secs_f64());
                }
            }
        }
    }
    if budgets.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config("step budgets differ across strategies".into()));
    }
    let mut cells = Vec::new();
    for &domain in &st.domains {
        for &strategy in st.strategies.iter().filter(|&&s| s != Strategy::Scratch) {
            for (fi, &fraction) in st.fractions.iter().enumerate() {
                for h in 0..hor {
                    let a = &scores[&(domain, strategy, fi, h)];
                    let b = &scores[&(domain, Strategy::Scratch, fi, h)];
                    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                    cells.push(StudyCell {
                        domain,
                        strategy,
                        fraction,
                        horizon: h + 1,
                        wins: diffs.iter().filter(|&&d| d > 0.0).count(),
                        seeds: diffs.len(),
                        margin: mean_std(&diffs).0,
                    });
                }
            }
        }
    }
    for c in &cells {
        let region = format!("{}/{}/{}", c.domain.name(), c.strategy.name(), c.fraction);
        report.push("wins_vs_scratch", Some(c.horizon), &region, c.wins as f64, cfg.pretrain_seed);
        report.push("margin_vs_scratch", Some(c.horizon), &region, c.margin, cfg.pretrain_seed);
    }
    report.note("budget", budgets.first());
    report.note("cells", &cells);
    report.note("seeds", &cfg.seeds);
    report.note("pretrain_seed", cfg.pretrain_seed);
    report.note("runtime_s", runtimes);
    Ok(StudyResult { report, cells })
}
