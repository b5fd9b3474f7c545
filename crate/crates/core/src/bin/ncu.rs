use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ncu_core::pipeline::{
    evaluate, histogram_csv, learn_negatives, load_checkpoint, pretrain, read_metrics, save_checkpoint, unlearn,
    Checkpoint, MetricsLine, MetricsSink, MetricsWriter, Mode, RunConfig,
};
use ncu_core::synthgen::{generate, generate_test, load_dataset, save_dataset, GenConfig, Split};
use ncu_core::{NcuError, Result};

#[derive(Parser)]
#[command(name = "ncu", version, about = "Noisy correspondence unlearning on synthetic two-tower data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        /// TOML generator config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        /// Pairs per class of the held-out split.
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both towers from scratch on InfoNCE.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Learn the negative head from a pretrain checkpoint.
    LearnNegatives {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Unlearn noisy pairs starting from a checkpoint.
    Unlearn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "in")]
        input: PathBuf,
        /// ncu, gradient_ascent or continued_infonce.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data_fraction: Option<f64>,
    },
    /// Retrieval metrics of a checkpoint on a dataset, as JSON.
    Evaluate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also append the report to this metrics stream.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Similarity histograms of every evaluation in a metrics stream, as CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; defaults to the input checkpoint's config, or built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines stream, appended one object per epoch.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}, expected train or test")),
    }
}

impl RunArgs {
    fn config(&self, base: Option<&Checkpoint>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(c)) => c.config.clone(),
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn sink(&self) -> Result<Box<dyn MetricsSink>> {
        Ok(match &self.metrics {
            Some(p) => Box::new(MetricsWriter::append(p)?),
            None => Box::new(()),
        })
    }

    fn finish(&self, ckpt: &Checkpoint) -> Result<()> {
        save_checkpoint(ckpt, &self.out)?;
        let last = ckpt.history.last().map_or(f64::NAN, |r| r.loss);
        eprintln!("{} checkpoint written to {} (last epoch loss {last:.6})", ckpt.phase.name(), self.out.display());
        Ok(())
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, seed, split, per_class, out } => {
            let mut cfg = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| NcuError::InvalidConfig(e.to_string()))?,
                None => GenConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let ds = match split {
                Split::Train => generate(&cfg)?,
                Split::Test => generate_test(&cfg, per_class)?,
            };
            save_dataset(&ds, &out)?;
            eprintln!("{} pairs ({} corrupted) written to {}", ds.len(), ds.corrupted_count(), out.display());
        }
        Command::Pretrain { run } => {
            let cfg = run.config(None)?;
            let data = load_dataset(&run.data)?;
            let ckpt = pretrain(&cfg, &data, run.sink()?.as_mut())?;
            run.finish(&ckpt)?;
        }
        Command::LearnNegatives { run, input } => {
            let reference = load_checkpoint(&input)?;
            let cfg = run.config(Some(&reference))?;
            let data = load_dataset(&run.data)?;
            let ckpt = learn_negatives(&cfg, &data, &reference, run.sink()?.as_mut())?;
            run.finish(&ckpt)?;
        }
        Command::Unlearn { run, input, mode, data_fraction } => {
            let start = load_checkpoint(&input)?;
            let mut cfg = run.config(Some(&start))?;
            if let Some(m) = mode {
                cfg.mode = Mode::parse(&m)?;
            }
            if let Some(f) = data_fraction {
                cfg.data_fraction = f;
            }
            let data = load_dataset(&run.data)?;
            let ckpt = unlearn(&cfg, &data, &start, run.sink()?.as_mut())?;
            run.finish(&ckpt)?;
        }
        Command::Evaluate { input, data, out, metrics } => {
            let ckpt = load_checkpoint(&input)?;
            let report = evaluate(&ckpt, &load_dataset(&data)?)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| NcuError::Format(e.to_string()))?;
            write_text(out.as_deref(), &format!("{json}\n"))?;
            if let Some(p) = metrics {
                let label = input.display().to_string();
                MetricsWriter::append(p)?.write(&MetricsLine::Evaluate { label, report })?;
            }
        }
        Command::Report { metrics, out } => {
            write_text(out.as_deref(), &histogram_csv(&read_metrics(metrics)?))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
