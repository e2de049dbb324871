use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hdge::eval::report::write_report;
use hdge::harness::config::parse_gen_data;
use hdge::harness::{parse_config, prepare_data, run_eval, run_gen_data, run_sweep, run_train_and_eval, SweepAxis};
use hdge::model::load_checkpoint;

#[derive(Parser)]
#[command(name = "hdge", version, about = "Train and evaluate hybrid energy-based classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes metrics.jsonl, checkpoints and report.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the config's eval list.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value and seed; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize a dataset (and OOD sets) as CSV plus manifests.
    GenData {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out } => {
            let mut cfg = parse_config(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.out.clone());
            let (trained, records) = run_train_and_eval(&cfg, &out)?;
            if let Some(last) = trained.history.last() {
                println!(
                    "trained {} steps, final loss {:.6} (train acc {:.4})",
                    trained.checkpoint.step, last.loss_total, last.train_acc
                );
            }
            if cfg.hdge.alpha == 0.5 && cfg.objective == hdge::harness::config::Objective::Hdge {
                println!("note: at alpha = 0.5 the logged total is half of the unweighted ce + cl sum");
            }
            for r in &records {
                print_record(r);
            }
            println!("artifacts in {}", out.display());
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let cfg = parse_config(&config).with_context(|| format!("reading {}", config.display()))?;
            let splits = prepare_data(&cfg)?;
            let mut dims = vec![splits.train.dim()];
            dims.extend(&cfg.hidden);
            dims.push(splits.train.class_count);
            let params = load_checkpoint(&checkpoint, Some(&dims))?;
            let records = run_eval(&cfg, &params, &splits)?;
            let dir = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("report.jsonl");
            write_report(&path, &records)?;
            for r in &records {
                print_record(r);
            }
            println!("report in {}", path.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = parse_config(&config).with_context(|| format!("reading {}", config.display()))?;
            if cfg.eval.metrics.is_empty() {
                bail!("sweep needs at least one metric in `eval`");
            }
            let out = out.unwrap_or_else(|| cfg.out.clone());
            std::fs::create_dir_all(&out)?;
            let rows = run_sweep(&cfg, axis, &values, Some(&out))?;
            for r in rows.iter().filter(|r| r.kind == "mean") {
                let eps = r.epsilon.map(|e| format!(" eps={e}")).unwrap_or_default();
                println!(
                    "{}={} {} [{}{}] mean {:.6}",
                    r.axis, r.value, r.metric, r.dataset, eps, r.score
                );
            }
            println!("table in {}", out.join("sweep.csv").display());
        }
        Command::GenData { spec } => {
            let spec = parse_gen_data(&spec).with_context(|| format!("reading {}", spec.display()))?;
            for p in run_gen_data(&spec)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn print_record(r: &hdge::eval::report::ReportRecord) {
    let eps = r.epsilon.map(|e| format!(" eps={e}")).unwrap_or_default();
    println!("{} [{}{}] = {:.6} (n={})", r.metric, r.dataset, eps, r.value, r.n);
}
