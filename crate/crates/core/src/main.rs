use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use occflow::occupancy::save_grid;
use occflow::pipeline::commands::{self, nfe_sweep, ModelForecaster};
use occflow::pipeline::data::validation_pool;
use occflow::pipeline::{Checkpoint, ExperimentConfig, Report, Strategy, WorldModel};

const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser)]
#[command(name = "occflow", version, about = "Latent flow-matching occupancy world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults apply when absent. OCCFLOW_* variables override keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source compressor and flow.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt the compressor to the target domain and score the alignment.
    Align {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Fine-tune on the target domain with one strategy.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        /// full, lora, cfm_only or scratch.
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Forecast one validation clip and sweep the solver step count.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Index into the validation pool.
        #[arg(long, default_value_t = 0)]
        clip: usize,
    },
    /// Bits per dimension of validation futures.
    Nll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast metrics on the validation pool.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Full transfer grid against training from scratch.
    Study {
        #[command(flatten)]
        common: Common,
        /// Reuse a pretrained checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::from_env()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(dir: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    Checkpoint::load(dir, Some(&cfg.hash())).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn save(out: &Path, ck: Option<&Checkpoint>, report: &Report) -> Result<()> {
    if let Some(ck) = ck {
        ck.save(out.join(CHECKPOINT_DIR))?;
    }
    report.write(out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn train_report(cfg: &ExperimentConfig, command: &str, ck: &Checkpoint, seed: u64) -> Report {
    let mut r = Report::new(command, &cfg.hash());
    for (phase, steps) in &ck.manifest.steps {
        r.push(&format!("steps_{phase}"), None, "all", *steps as f64, seed);
    }
    r.note("steps", &ck.manifest.steps);
    r
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(common.config.as_deref())?;
            let seed = common.seed.unwrap_or(cfg.pretrain_seed);
            let (model, logs) = commands::pretrain(&cfg, seed)?;
            let steps = logs.iter().map(|(k, v)| (k.clone(), v.losses.len() as u64)).collect();
            let ck = model.to_checkpoint(commands::KIND_PRETRAIN, &cfg.hash(), seed, steps)?;
            let mut r = train_report(&cfg, "pretrain", &ck, seed);
            for (phase, log) in &logs {
                r.push(&format!("final_loss_{phase}"), None, "all", log.tail_mean(50), seed);
            }
            r.note("latent_scale", model.flow_cfg.latent_scale);
            save(&common.out, Some(&ck), &r)?;
        }
        Command::Align { common, checkpoint, fraction } => {
            let cfg = load_config(common.config.as_deref())?;
            let seed = common.seed.unwrap_or(cfg.seeds[0]);
            let pre = load_checkpoint(&checkpoint, &cfg)?;
            let (ck, report) = commands::cmd_align_vae(&cfg, &pre, fraction.unwrap_or(cfg.fraction), seed)?;
            save(&common.out, Some(&ck), &report)?;
        }
        Command::Finetune {
            common,
            checkpoint,
            fraction,
            strategy,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let seed = common.seed.unwrap_or(cfg.seeds[0]);
            let pre = load_checkpoint(&checkpoint, &cfg)?;
            let strategy = strategy.unwrap_or(cfg.strategy);
            let fraction = fraction.unwrap_or(cfg.fraction);
            let ck = commands::cmd_finetune(&cfg, &pre, strategy, fraction, seed)?;
            let mut r = train_report(&cfg, "finetune", &ck, seed);
            r.note("strategy", strategy);
            r.note("fraction", fraction);
            save(&common.out, Some(&ck), &r)?;
        }
        Command::Sample {
            common,
            checkpoint,
            nfe,
            cfg_scale,
            clip,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let seed = common.seed.unwrap_or(cfg.seeds[0]);
            let model = WorldModel::from_checkpoint(&load_checkpoint(&checkpoint, &cfg)?)?;
            let val = validation_pool(&cfg, model.domain)?;
            let Some(c) = val.get(clip) else {
                bail!("clip {clip} outside the validation pool of {}", val.len());
            };
            let nfe = nfe.unwrap_or(model.flow_cfg.nfe);
            let s = cfg_scale.unwrap_or(model.flow_cfg.cfg_scale);
            let f = commands::cmd_sample(&model, c, nfe, s, seed)?;
            std::fs::create_dir_all(&common.out)?;
            for (k, g) in f.frames.iter().enumerate() {
                save_grid(common.out.join(format!("forecast_{}.ocg", k + 1)), g)?;
                save_grid(common.out.join(format!("truth_{}.ocg", k + 1)), &c.frames()[model.flow_cfg.history + k])?;
            }
            let refs: Vec<_> = val.iter().collect();
            let mut r = nfe_sweep(&cfg, &model, &refs, s, seed)?;
            r.note("clip", clip);
            r.note("nfe", nfe);
            save(&common.out, None, &r)?;
        }
        Command::Nll { common, checkpoint } => {
            let cfg = load_config(common.config.as_deref())?;
            let model = WorldModel::from_checkpoint(&load_checkpoint(&checkpoint, &cfg)?)?;
            let val = validation_pool(&cfg, model.domain)?;
            let clips: Vec<_> = val.iter().take(cfg.likelihood.clips).collect();
            let base = common.seed.unwrap_or(cfg.seeds[0]);
            let seeds: Vec<u64> = (0..cfg.likelihood.seeds as u64).map(|i| base + i).collect();
            save(&common.out, None, &commands::cmd_nll(&cfg, &model, &clips, &seeds)?)?;
        }
        Command::Eval {
            common,
            checkpoint,
            nfe,
            cfg_scale,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let model = WorldModel::from_checkpoint(&load_checkpoint(&checkpoint, &cfg)?)?;
            let val = validation_pool(&cfg, model.domain)?;
            let clips: Vec<_> = val.iter().collect();
            let f = ModelForecaster {
                model: &model,
                nfe: nfe.unwrap_or(model.flow_cfg.nfe),
                cfg_scale: cfg_scale.unwrap_or(model.flow_cfg.cfg_scale),
            };
            let base = common.seed.unwrap_or(cfg.seeds[0]);
            let seeds: Vec<u64> = (0..cfg.eval.sample_seeds as u64).map(|i| base + i).collect();
            let mut r = commands::cmd_evaluate(&cfg, &f, &clips, &seeds)?;
            r.note("nfe", f.nfe);
            r.note("cfg_scale", f.cfg_scale);
            if cfg.eval.with_nll {
                let nll_clips: Vec<_> = clips.iter().take(cfg.likelihood.clips).copied().collect();
                r.extend(commands::cmd_nll(&cfg, &model, &nll_clips, &seeds)?);
            }
            save(&common.out, None, &r)?;
        }
        Command::Study { common, checkpoint } => {
            let cfg = load_config(common.config.as_deref())?;
            let model = match checkpoint {
                Some(dir) => commands::load_pretrained(&cfg, &load_checkpoint(&dir, &cfg)?)?,
                None => {
                    let seed = common.seed.unwrap_or(cfg.pretrain_seed);
                    let (m, logs) = commands::pretrain(&cfg, seed)?;
                    let steps = logs.iter().map(|(k, v)| (k.clone(), v.losses.len() as u64)).collect();
                    m.to_checkpoint(commands::KIND_PRETRAIN, &cfg.hash(), seed, steps)?
                        .save(common.out.join("pretrain"))?;
                    m
                }
            };
            let res = commands::cmd_transfer_study(&cfg, &model)?;
            for c in &res.cells {
                println!(
                    "{:<9} {:<8} f={:.2} h={} wins {}/{} margin {:+.4}",
                    c.domain.name(),
                    c.strategy.name(),
                    c.fraction,
                    c.horizon,
                    c.wins,
                    c.seeds,
                    c.margin
                );
            }
            save(&common.out, None, &res.report)?;
        }
    }
    Ok(())
}
