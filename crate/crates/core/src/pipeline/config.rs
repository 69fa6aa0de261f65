//! Experiment configuration: TOML file, environment overrides, canonical hash.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfm::FlowConfig;
use crate::error::{Error, Result};
use crate::likelihood::OdeConfig;
use crate::occupancy::{Domain, SceneConfig};
use crate::vae::{VaeConfig, VaeTrainConfig};

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with a double underscore: `OCCFLOW_BUDGET__FINETUNE_STEPS=50`.
pub const ENV_PREFIX: &str = "OCCFLOW_";

/// Data fractions of the transfer protocol.
pub const FRACTIONS: [f64; 4] = [0.10, 0.25, 0.50, 1.00];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every VAE and flow weight trainable from the pretrained start.
    Full,
    /// Pretrained flow frozen, low-rank adapters trained.
    Lora,
    /// Pretrained flow with a VAE trained from scratch on target data.
    CfmOnly,
    /// Everything from random initialization.
    Scratch,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Full, Strategy::Lora, Strategy::CfmOnly, Strategy::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Lora => "lora",
            Strategy::CfmOnly => "cfm_only",
            Strategy::Scratch => "scratch",
        }
    }

    /// Whether the target VAE starts from (or is aligned to) the pretrained one.
    pub fn uses_adapted_vae(self) -> bool {
        matches!(self, Strategy::Full | Strategy::Lora)
    }

    pub fn uses_pretrained_flow(self) -> bool {
        self != Strategy::Scratch
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected full, lora, cfm_only or scratch")))
    }
}

/// Checks `f` against [`FRACTIONS`] and returns the canonical value.
pub fn check_fraction(f: f64) -> Result<f64> {
    FRACTIONS
        .into_iter()
        .find(|v| (v - f).abs() < 1e-9)
        .ok_or_else(|| Error::Config(format!("fraction {f} not in {FRACTIONS:?}")))
}

/// Compressor architecture; grid dims and class count follow the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeArch {
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: Vec<usize>,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_channels: 4,
            hidden: vec![128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source-domain clips used for pretraining.
    pub pretrain_clips: usize,
    /// Target-domain pool that fractions are drawn from.
    pub target_clips: usize,
    /// Held-out target clips.
    pub val_clips: usize,
    /// Scene seeds of each pool start at these offsets, keeping them disjoint.
    pub source_seed_offset: u64,
    pub target_seed_offset: u64,
    pub val_seed_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_clips: 1024,
            target_clips: 200,
            val_clips: 32,
            source_seed_offset: 0,
            target_seed_offset: 1_000_000,
            val_seed_offset: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub vae_lr: f64,
    pub flow_lr: f64,
    pub finetune_lr: f64,
    pub warmup_steps: u64,
    pub vae_batch: usize,
    pub flow_batch: usize,
    /// VAE first-moment decay.
    pub vae_beta1: f64,
    pub ema_decay: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            vae_lr: 2e-3,
            flow_lr: 1e-3,
            finetune_lr: 5e-4,
            warmup_steps: 100,
            vae_batch: 8,
            flow_batch: 32,
            vae_beta1: 0.9,
            ema_decay: 0.99,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

/// Optimizer step counts; identical for every strategy within a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub pretrain_vae_steps: u64,
    pub pretrain_flow_steps: u64,
    /// Target VAE steps (alignment, continued training or scratch).
    pub align_steps: u64,
    pub finetune_steps: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            pretrain_vae_steps: 1500,
            pretrain_flow_steps: 6000,
            align_steps: 600,
            finetune_steps: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodSettings {
    /// Hutchinson probes per step; 0 computes the exact divergence.
    pub n_probes: usize,
    /// Clips scored by `nll` and `eval`.
    pub clips: usize,
    /// Probe seeds for the across-seed spread.
    pub seeds: usize,
}

impl Default for LikelihoodSettings {
    fn default() -> Self {
        Self {
            n_probes: 16,
            clips: 8,
            seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub nfe_sweep: Vec<usize>,
    /// Sampling seeds for the seed-spread statistics.
    pub sample_seeds: usize,
    pub cknna_k: usize,
    /// RBF bandwidth; absent means the median heuristic.
    pub sigma: Option<f64>,
    /// BEV pooling of the grid feature extractor.
    pub feature_pool: usize,
    /// Outer region edge in meters; absent means half the grid extent.
    pub region_extent: Option<f64>,
    /// Score likelihood during `eval` (costly).
    pub with_nll: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            nfe_sweep: vec![1, 2, 5, 10, 20],
            sample_seeds: 5,
            cknna_k: 10,
            sigma: None,
            feature_pool: 8,
            region_extent: None,
            with_nll: false,
        }
    }
}

/// Grid of the transfer study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub domains: Vec<Domain>,
    pub strategies: Vec<Strategy>,
    pub fractions: Vec<f64>,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            domains: vec![Domain::Semantic, Domain::HighRes, Domain::Indoor],
            strategies: Strategy::ALL.to_vec(),
            fractions: FRACTIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub source: Domain,
    pub target: Domain,
    pub strategy: Strategy,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub pretrain_seed: u64,
    /// When set, `flow.latent_scale` is replaced by this value divided by the
    /// std of the trained compressor's posterior means.
    pub latent_std: Option<f64>,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub vae: VaeArch,
    pub vae_train: VaeTrainConfig,
    pub flow: FlowConfig,
    pub ode: OdeConfig,
    pub likelihood: LikelihoodSettings,
    pub optim: OptimSettings,
    pub budget: Budget,
    pub eval: EvalSettings,
    pub study: StudySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            source: Domain::Outdoor,
            target: Domain::Semantic,
            strategy: Strategy::Full,
            fraction: 0.10,
            seeds: vec![0, 1, 2, 3, 4],
            pretrain_seed: 0,
            latent_std: Some(1.0),
            scene: SceneConfig {
                dims: [16, 16, 4],
                n_walls: 2,
                ..SceneConfig::default()
            },
            data: DataConfig::default(),
            vae: VaeArch::default(),
            vae_train: VaeTrainConfig {
                kappa: 0.1,
                ..VaeTrainConfig::default()
            },
            flow: FlowConfig {
                latent_scale: 1.0,
                ..FlowConfig::default()
            },
            ode: OdeConfig::default(),
            likelihood: LikelihoodSettings::default(),
            optim: OptimSettings::default(),
            budget: Budget::default(),
            eval: EvalSettings::default(),
            study: StudySettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty::<(String, String)>())
    }

    /// Parses `text`, applies `OCCFLOW_*` overrides from `env` and validates.
    pub fn from_toml_with_env<I, K, V>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        // deterministic application order
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut table, &key, &raw)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file with overrides from the process environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    /// Defaults with overrides from the process environment.
    pub fn from_env() -> Result<Self> {
        Self::from_toml_with_env("", std::env::vars())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction(self.fraction)?;
        for &f in &self.study.fractions {
            check_fraction(f)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.latent_std.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("latent_std must be positive".into()));
        }
        if self.source != Domain::Outdoor {
            return Err(Error::Config("the pretraining source must be the outdoor domain".into()));
        }
        if self.target == Domain::Outdoor || self.study.domains.contains(&Domain::Outdoor) {
            return Err(Error::Config("targets must differ from the outdoor source".into()));
        }
        if self.data.pretrain_clips == 0 || self.data.target_clips == 0 || self.data.val_clips < 2 {
            return Err(Error::Config("empty data pools (val_clips must be >= 2)".into()));
        }
        let ranges = [
            (self.data.source_seed_offset, self.data.pretrain_clips as u64),
            (self.data.target_seed_offset, self.data.target_clips as u64),
            (self.data.val_seed_offset, self.data.val_clips as u64),
        ];
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.0 < b.0 + b.1 && b.0 < a.0 + a.1 {
                    return Err(Error::Config("source, target and validation seed ranges overlap".into()));
                }
            }
        }
        if self.optim.vae_batch == 0 || self.optim.flow_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.optim.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        if self.eval.cknna_k == 0 || self.eval.sample_seeds == 0 || self.eval.feature_pool == 0 {
            return Err(Error::Config("cknna_k, sample_seeds and feature_pool must be >= 1".into()));
        }
        if self.flow.history == 0 {
            return Err(Error::Config("forecasting needs at least one history frame".into()));
        }
        self.flow.validate()?;
        self.vae_train.validate()?;
        self.ode.n_steps()?;
        for d in [Domain::Outdoor, self.target] {
            self.vae_config(d).validate()?;
        }
        Ok(())
    }

    /// Frames per clip: history followed by horizon.
    pub fn clip_frames(&self) -> usize {
        self.flow.history + self.flow.horizon
    }

    /// Model-facing grid dims; high-res clips are pooled back to base dims.
    pub fn model_dims(&self) -> [usize; 3] {
        self.scene.dims
    }

    pub fn vae_config(&self, domain: Domain) -> VaeConfig {
        VaeConfig {
            grid_dims: self.model_dims(),
            n_classes: self.scene.n_classes(domain) as usize,
            factor: self.vae.factor,
            latent_channels: self.vae.latent_channels,
            hidden: self.vae.hidden.clone(),
        }
    }

    /// Latent values per frame.
    pub fn frame_len(&self) -> usize {
        let [h, w, _] = self.vae_config(Domain::Outdoor).latent_dims();
        h * w * self.vae.latent_channels
    }

    /// Hex SHA-256 of the canonical JSON form (object keys sorted), so key
    /// order in the source file does not matter.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let text = canonical_json(&value);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<&str> = key.split("__").collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let value = parse_value(raw);
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal when `raw` parses as one, else a plain string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
