use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ovv_core::config::RunConfig;
use ovv_core::dataset::{generate_dataset, prepare_examples, read_dataset, write_dataset, DataConfig};
use ovv_core::evalbench::{count_flops, evaluate, sweep, train_sweep, write_sweep_outputs, compare_methods};
use ovv_core::model::{load_checkpoint, save_checkpoint, Model};
use ovv_core::trainer::{grad_check, metrics_csv, train_new, Example};

#[derive(Parser)]
#[command(name = "ovv", version, about = "Object-guided token sampling for video transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (defaults to the checkpoint path with a .csv extension).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Validation accuracy of a checkpoint with multi-view testing.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        views: usize,
        /// Run config whose sampler section is used (no token drop otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train missing checkpoints, evaluate every method and ratio, write
    /// CSV, SVG and a comparison table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing dataset directory (generated from the config otherwise).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Analytic FLOP count for a token budget.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokens: usize,
        #[arg(long, default_value_t = 0)]
        objects: usize,
    },
    /// Finite-difference check of the full model's gradients at 64-bit.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn dataset_for(cfg: &RunConfig, dir: Option<&PathBuf>) -> Result<ovv_core::dataset::Dataset> {
    Ok(match dir {
        Some(d) => read_dataset(d).with_context(|| format!("reading dataset {}", d.display()))?,
        None => generate_dataset(&cfg.synth, &cfg.data)?,
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Gen { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = generate_dataset(&cfg.synth, &cfg.data)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} train and {} val videos to {}", ds.train.len(), ds.val.len(), out.display());
        }
        Cmd::Train { config, data, out, metrics } => {
            let cfg = RunConfig::load(&config)?;
            let ds = read_dataset(&data)?;
            let train_set = prepare_examples::<f32>(&cfg.model, &ds.train)?;
            let val_set = prepare_examples::<f32>(&cfg.model, &ds.val)?;
            let start = Instant::now();
            let (model, log) = train_new(&cfg.model, &cfg.sampler, &train_set, &val_set, &cfg.train, |m| {
                eprintln!(
                    "epoch {:>3} step {:>6} loss {:.4} train_acc {:.3} val_acc {:.3} ({:.0}s)",
                    m.epoch,
                    m.step,
                    m.loss,
                    m.train_acc,
                    m.val_acc,
                    start.elapsed().as_secs_f64()
                )
            })?;
            save_checkpoint(&out, &model.cfg, &model.params)?;
            std::fs::write(metrics.unwrap_or_else(|| out.with_extension("csv")), metrics_csv(&log))?;
        }
        Cmd::Eval { ckpt, data, views, config } => {
            let (mcfg, params) = load_checkpoint::<f32>(&ckpt)?;
            let model = Model { cfg: mcfg, params };
            let sampler = match config {
                Some(c) => RunConfig::load(c)?.sampler,
                None => Default::default(),
            };
            let ds = read_dataset(&data)?;
            let res = evaluate(&model, &ds.val, &sampler, views)?;
            println!("accuracy {:.4} over {} videos, {views} view(s)", res.accuracy, ds.val.len());
        }
        Cmd::Sweep { config, out, data } => {
            let cfg = RunConfig::load(&config)?;
            let ds = dataset_for(&cfg, data.as_ref())?;
            if cfg.sweep.train_missing {
                train_sweep(&cfg.model, &cfg.train, &cfg.sweep, &ds, |m, r, s, e| {
                    eprintln!("{} r={r:.2} seed={s}: epoch {} loss {:.4} val_acc {:.3}", m.name(), e.epoch, e.loss, e.val_acc)
                })?;
            }
            let rows = sweep(&cfg.sweep, &ds)?;
            write_sweep_outputs(&out, &rows)?;
            print!("{}", compare_methods(&rows));
        }
        Cmd::Flops { config, tokens, objects } => {
            let cfg = RunConfig::load(&config)?;
            let r = count_flops(&cfg.model, tokens, objects);
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Gradcheck { config } => {
            let cfg = RunConfig::load(&config)?;
            let data = DataConfig {
                train_videos: 2,
                val_videos: 0,
                ..cfg.data.clone()
            };
            let ds = generate_dataset(&cfg.synth, &data)?;
            let mut model = Model::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
            model.params.perturb(cfg.train.seed, 0.3);
            let examples: Vec<Example<f64>> = prepare_examples(&cfg.model, &ds.train)?;
            let batch: Vec<_> = examples
                .into_iter()
                .enumerate()
                .map(|(i, e)| (e, cfg.sampler.with_seed(cfg.sampler.seed + i as u64)))
                .collect();
            let report = grad_check(&model, &batch, cfg.train.label_smoothing, &[])?;
            for t in &report.per_tensor {
                println!("{:<32} {:.3e}  analytic {:+.6e}  numeric {:+.6e}", t.name, t.rel_err, t.analytic, t.numeric);
            }
            println!("max relative error {:.3e} over {} parameters", report.max_rel_err, report.checked);
            if report.max_rel_err >= 1e-4 {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
