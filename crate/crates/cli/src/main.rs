use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pow2prune::metrics::Metric;
use pow2prune::model_io::{self, Encoding};
use pow2prune::pruning::Criterion;
use pow2prune_cli::config::ExperimentConfig;
use pow2prune_cli::datasets::{gen_split, load_dataset, save_dataset, Split};
use pow2prune_cli::pipeline::{self, info, persist, train_csv, Data};
use pow2prune_cli::{exit_code, report, sweep};

#[derive(Parser)]
#[command(name = "pow2prune", version, about = "Prune, quantize to powers of two, and run shift-based inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset as JSON.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Sample count (defaults to n_train or n_eval from the config).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss and metric CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Prune a trained model.
    Prune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch trajectory CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Quantize a model to powers of two.
    Quantize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train, prune, quantize and verify, writing every artifact.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (POW2PRUNE_OUT takes precedence).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model on a dataset; prints one percentage.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// threshold:<tau>, delta:<tau>, mse or top1.
        #[arg(long, default_value = "threshold:1")]
        metric: Metric,
        /// Use shift-and-add inference (model must be fully quantized).
        #[arg(long)]
        shift: bool,
    },
    /// Print the per-stage summary of a pipeline run.
    Report { run: PathBuf },
    /// Join the quantization curves of two runs into one CSV.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare pruning criteria over several thresholds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-13, 1e-12, 3e-12])]
        taylor: Vec<f64>,
        #[arg(long = "abs", value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6])]
        abs: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_opt(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<pow2prune::autodiff::Model> {
    model_io::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, split, n, out } => {
            let cfg = load_config(config.as_deref())?;
            let (split, default_n) = match split {
                SplitArg::Train => (Split::Train, cfg.n_train),
                SplitArg::Eval => (Split::Eval, cfg.n_eval),
            };
            let data = gen_split(&cfg.task, cfg.seed, n.unwrap_or(default_n), split)?;
            save_dataset(&data, &out)?;
        }
        Command::Train { config, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let data = Data::generate(&cfg)?;
            let (model, records) = pipeline::train_stage(&cfg, &data).context("stage train")?;
            persist(&model, Some(&out), Encoding::DenseF32)?;
            write_opt(log.as_deref(), &train_csv(&records))?;
        }
        Command::Prune { config, model, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let data = Data::generate(&cfg)?;
            let mut m = load_model(&model)?;
            let res = pipeline::prune_stage(&cfg, &data, &mut m).context("stage prune")?;
            persist(&m, Some(&out), Encoding::DenseF32)?;
            write_opt(log.as_deref(), &res.to_csv())?;
            info(format!("sparsity {:.4}", res.final_sparsity()));
        }
        Command::Quantize { config, model, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let data = Data::generate(&cfg)?;
            let mut m = load_model(&model)?;
            let res = pipeline::quant_stage(&cfg, &data, &mut m).context("stage quantize")?;
            persist(&m, Some(&out), Encoding::SparsePow2)?;
            write_opt(log.as_deref(), &res.to_csv())?;
            info(format!("sparsity {:.4}", res.final_sparsity()));
        }
        Command::Pipeline { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = cfg.resolve_out_dir(out.as_deref());
            let rep = pipeline::run_pipeline(&cfg, dir.as_deref())?;
            println!("{}", pipeline::summary_csv(&rep.summary).trim_end());
        }
        Command::Eval { model, data, metric, shift } => {
            let m = load_model(&model)?;
            let d = load_dataset(&data)?;
            let pred = if shift {
                let compiled = pow2prune::inference::compile(&m)?;
                pow2prune::inference::forward_shift(&compiled, &d.inputs)?.output
            } else {
                m.evaluate(&d.inputs)?
            };
            println!("{:.4}", metric.evaluate(&pred, &d.targets)?);
        }
        Command::Report { run } => print!("{}", report::report(&run)?),
        Command::Compare { a, b, out } => {
            let csv = report::compare(&a, &b)?;
            match out {
                Some(p) => write_opt(Some(&p), &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Sweep { config, taylor, abs, out } => {
            let cfg = load_config(config.as_deref())?;
            let runs: Vec<_> = taylor
                .iter()
                .map(|&t| (Criterion::TaylorScore, t))
                .chain(abs.iter().map(|&t| (Criterion::AbsValue, t)))
                .collect();
            let rows = sweep::criterion_sweep(&cfg, &runs)?;
            write_opt(Some(&out), &sweep::sweep_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
