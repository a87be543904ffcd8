//! `cplae` — train, evaluate, and ablate the contrastive-prototype model
//! from the command line.
//!
//! Commands: `synth` (deterministic dataset generation), `train`, `eval`,
//! `ablate`. Exit codes: 0 success, 1 usage/config error, 2 runtime error.

mod config;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use config::{ResolvedRun, RunConfigFile};
use cplae_core::autodiff::Rng;
use cplae_core::cplae::Model;
use cplae_core::data::{write_dataset, Split};
use cplae_core::eval::{ablation_run, export_embeddings, meta_test};
use cplae_core::nn::checkpoint;
use cplae_core::seeds::TAG_INIT;
use cplae_core::train::run_training_observed;
use cplae_core::{Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "cplae",
    about = "Few-shot meta-learning with contrastive prototypes and augmented embeddings",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run-configuration JSON file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset (PGM images + manifest).
    Synth {
        /// Number of classes (split into train/val/test groups).
        #[arg(long, default_value_t = 20)]
        classes: usize,
        /// Samples per class.
        #[arg(long = "per-class", default_value_t = 40)]
        per_class: usize,
        /// Square image side length in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for images and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train a model; writes runlog.csv, summary.json, and best.ckpt.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for run artifacts.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on meta-test episodes; writes eval_report.json.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by `train` (best.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of meta-test episodes (overrides the config).
        #[arg(long)]
        episodes: Option<usize>,
        /// Worker threads for episode evaluation.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Output directory for the JSON report.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train and meta-test all four presets; prints the comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated run seeds, one full ablation per seed.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Meta-test episodes per trained model (overrides the config).
        #[arg(long)]
        episodes: Option<usize>,
        /// Worker threads for episode evaluation.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Output directory for ablation.csv / ablation.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(if err.is_config() { 1 } else { 2 });
    }
}

fn load_and_resolve(args: &ConfigArgs) -> Result<(cplae_core::data::LabeledDataset, ResolvedRun)> {
    let file = match &args.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let dataset = file.load_data()?;
    let resolved = file.resolve(&dataset, args.seed)?;
    Ok((dataset, resolved))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            classes,
            per_class,
            size,
            seed,
            out,
        } => {
            let dataset = cplae_core::data::synth_generate(classes, per_class, size, seed)?;
            let manifest = write_dataset(&dataset, &out)?;
            let counts: Vec<usize> = Split::ALL
                .iter()
                .map(|&s| dataset.split_classes(s).len())
                .collect();
            println!(
                "wrote {} samples ({} classes: {} train / {} val / {} test) to {}",
                dataset.len(),
                dataset.class_count(),
                counts[0],
                counts[1],
                counts[2],
                manifest.display()
            );
            Ok(())
        }
        Command::Train { config, out } => {
            let (dataset, resolved) = load_and_resolve(&config)?;
            print_run_header(&resolved);
            let output = run_training_observed(
                &dataset,
                &resolved.train,
                Some(&out),
                None,
                &mut |rec| {
                    println!(
                        "epoch {:>3}  lr {:.6}  l_fsl {:.4}  l_cpl {:.4}  l_total {:.4}  val_acc {:.4}",
                        rec.epoch,
                        rec.lr,
                        rec.mean_l_fsl,
                        rec.mean_l_cpl,
                        rec.mean_l_total,
                        rec.val_accuracy
                    );
                },
            )?;
            if let Some(acc) = output.pretrain_accuracy {
                println!("pretrain top-1 accuracy: {:.4}", acc);
            }
            println!(
                "best epoch {} (val_acc {:.4}); artifacts in {}",
                output.log.best_epoch,
                output.log.best_val_accuracy,
                out.display()
            );
            // store the effective config next to the run artifacts
            let echo_path = out.join("config.json");
            std::fs::write(
                &echo_path,
                serde_json::to_string_pretty(&resolved.echo).expect("echo serializes"),
            )
            .map_err(|e| Error::io(echo_path.display().to_string(), e))?;
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint: ckpt_path,
            episodes,
            threads,
            out,
        } => {
            let (dataset, resolved) = load_and_resolve(&config)?;
            let cfg = &resolved.train;
            let mut init_rng = Rng::derive(cfg.seed, TAG_INIT, 0);
            let mut model = Model::new(cfg.effective_model(), &mut init_rng)?;
            checkpoint::load(&mut model.store, &ckpt_path)?;

            let episode_count = episodes.unwrap_or(resolved.eval_episodes);
            let report = meta_test(
                &model,
                &dataset,
                &cfg.episode,
                Split::Test,
                episode_count,
                cfg.seed,
                threads,
                serde_json::to_value(&resolved.echo).expect("echo serializes"),
            )?;
            println!(
                "{}",
                report.format_line(cfg.episode.n_way, cfg.episode.k_shot)
            );
            println!("db_index: {:.4}", report.db_index_mean);

            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let report_path = out.join("eval_report.json");
            std::fs::write(&report_path, report.to_json())
                .map_err(|e| Error::io(report_path.display().to_string(), e))?;
            println!("report written to {}", report_path.display());

            if resolved.export_embeddings {
                let emb_path = out.join("embeddings.csv");
                export_embeddings(
                    &model,
                    &dataset,
                    &cfg.episode,
                    Split::Test,
                    resolved.export_episodes,
                    cfg.seed,
                    &emb_path,
                )?;
                println!("embeddings written to {}", emb_path.display());
            }
            Ok(())
        }
        Command::Ablate {
            config,
            seeds,
            episodes,
            threads,
            out,
        } => {
            let (dataset, resolved) = load_and_resolve(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let episode_count = episodes.unwrap_or(resolved.eval_episodes);
            let table = ablation_run(
                &dataset,
                &resolved.train,
                &seeds,
                episode_count,
                threads,
                out.as_deref(),
            )?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                println!("table written to {}", dir.join("ablation.csv").display());
            }
            Ok(())
        }
    }
}

fn print_run_header(resolved: &ResolvedRun) {
    let t = &resolved.train;
    println!(
        "preset {}  {}-way {}-shot q={}  views={}  epochs {}x{}  seed {}",
        t.preset.name(),
        t.episode.n_way,
        t.episode.k_shot,
        t.episode.q_queries,
        t.model.views,
        t.epochs,
        t.episodes_per_epoch,
        t.seed
    );
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed list entry '{s}'")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}
