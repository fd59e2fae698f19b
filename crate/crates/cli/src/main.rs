use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;

use vpl_core::data::Split;
use vpl_core::sweep::{aggregate, aggregate_csv, run_sweep, summary_table, SweepSpec};
use vpl_core::trainer::{evaluate_checkpoint, parse_pairs, Checkpoint, MetricsRow, RunConfig, Trainer};
use vpl_core::Error;

/// Joint convolutional/transformer training with a pair learning module.
#[derive(Parser)]
#[command(name = "vpl", version)]
struct Cli {
    /// Root directory of on-disk datasets, used when a config sets no `data.root`.
    #[arg(long, env = "VPL_DATA_ROOT", global = true)]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for metrics.csv, timing.csv and checkpoint.bin.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of configurations and aggregate the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn with_data_root(mut pairs: IndexMap<String, String>, root: Option<&Path>) -> IndexMap<String, String> {
    let on_disk = pairs.get("data.source").is_some_and(|s| s != "synthetic");
    if let (true, false, Some(r)) = (on_disk, pairs.contains_key("data.root"), root) {
        pairs.insert("data.root".into(), r.display().to_string());
    }
    pairs
}

fn load_config(path: &Path, root: Option<&Path>) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_pairs(with_data_root(parse_pairs(&text)?, root))?)
}

fn summary(rows: &[MetricsRow], config: &RunConfig) {
    let Some(last) = rows.last() else {
        return;
    };
    for (role, acc) in [("cnn", last.eval_cnn), ("trans", last.eval_trans)] {
        if let Some(a) = acc {
            let kind = if role == "cnn" { &config.cnn.backbone.kind } else { &config.trans.backbone.kind }.to_string();
            println!(
                "{role:<6} {kind:<12} {:<12} epochs {:>4}  top-1 {:6.2}%  top-5 {:6.2}%",
                config.mode.to_string(),
                last.epoch + 1,
                100.0 * a.top1,
                100.0 * a.top5
            );
        }
    }
}

fn run(config: Option<PathBuf>, resume: Option<PathBuf>, out: Option<PathBuf>, root: Option<&Path>) -> anyhow::Result<()> {
    let (mut trainer, out, resuming) = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let saved = ckpt.config()?;
            if let Some(path) = config {
                let given = load_config(&path, root)?;
                if given != saved {
                    bail!(
                        "{} does not match the configuration stored in {}",
                        path.display(),
                        ckpt_path.display()
                    );
                }
            }
            let train = Arc::new(saved.data.load(Split::Train)?);
            let eval = Arc::new(saved.data.load(Split::Test)?);
            let out = out.unwrap_or_else(|| ckpt_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            (Trainer::from_checkpoint(&ckpt, train, eval)?, out, true)
        }
        None => {
            let Some(path) = config else {
                bail!("`run` needs --config or --resume");
            };
            let config = load_config(&path, root)?;
            (Trainer::new(config)?, out.unwrap_or_else(|| PathBuf::from("vpl-run")), false)
        }
    };
    if trainer.is_finished() {
        println!("checkpoint already covers all {} epochs", trainer.config().epochs);
        return Ok(());
    }
    log::info!("writing to {}", out.display());
    let rows = trainer.run_to_dir(&out, resuming)?;
    summary(&rows, trainer.config());
    Ok(())
}

fn sweep(config: &Path, out: &Path, root: Option<&Path>) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut spec = SweepSpec::parse(&text)?;
    spec.base = with_data_root(spec.base, root);
    for cell in spec.cells() {
        spec.config(&cell, spec.seeds[0])
            .map_err(|e| anyhow::Error::new(e).context(format!("cell {} ({})", cell.index, cell.label())))?;
    }
    let records = run_sweep(&spec, out)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let rows = aggregate(out)?;
    std::fs::write(out.join("aggregate.csv"), aggregate_csv(&rows))?;
    let table = summary_table(&rows);
    std::fs::write(out.join("summary.txt"), &table)?;
    print!("{table}");
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see {}", records.len(), out.join("runs.csv").display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, split: SplitArg) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = ckpt.config()?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = config.data.load(split)?;
    for (role, acc) in evaluate_checkpoint(&ckpt, &data, config.eval_batch_size)? {
        println!(
            "{role:<6} {split} top-1 {:6.2}%  top-5 {:6.2}%",
            100.0 * acc.top1,
            100.0 * acc.top5
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.data_root.as_deref();
    let result = match cli.command {
        Command::Run { config, resume, out } => run(config, resume, out, root),
        Command::Sweep { config, out } => sweep(&config, &out, root),
        Command::Eval { checkpoint, split } => eval(&checkpoint, split),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config { .. }) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
