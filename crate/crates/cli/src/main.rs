//! `milbench`: generate MIL datasets, train and evaluate models, and run the
//! Standard-MIL audit.
//!
//! Settings resolve as flag > config file (or preset) > built-in default.
//! Exit codes: 0 success, 2 configuration or format error, 3 numerical
//! failure. Set `MILBENCH_LOG` (e.g. `info`, `debug`) for progress logs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use milbench::data::{GenSpec, Split};
use milbench::experiment::{self, DataSource, ExperimentConfig, ExperimentError};
use milbench::metrics::{MetricsReport, RunMetrics};
use milbench::models::ModelKind;
use milbench::{presets, Execution};

#[derive(Parser, Debug)]
#[command(name = "milbench", version, about = "Multi-instance learning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or import) a dataset and write its split files.
    Gen(Common),
    /// Train every configured model over all seeds.
    Train(Common),
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write per-instance scores to this CSV.
        #[arg(long, value_name = "PATH")]
        dump_scores: Option<PathBuf>,
    },
    /// Train on poisoned data and report a per-model verdict.
    Audit(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: audit, separable, mixed or mixed-biased.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Read a dataset directory written by `gen` instead of the configured source.
    #[arg(long, value_name = "DIR", conflicts_with = "manifest")]
    dataset: Option<PathBuf>,
    /// Read a feature-bag manifest instead of the configured source.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// KL coefficient.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Maximum epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Split scored by `train` and `eval`.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Maximum concurrent seeds; 1 runs sequentially.
    #[arg(long)]
    jobs: Option<usize>,
    /// Record wall-clock seconds in epoch logs (breaks byte reproducibility).
    #[arg(long)]
    timing: bool,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

const DEFAULT_OUT: &str = "milbench-out";

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => presets::by_name(name).ok_or_else(|| {
                ExperimentError::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    presets::NAMES.join(", ")
                ))
            })?,
            (None, None) => ExperimentConfig::new(DataSource::Generate(GenSpec::default())),
        };
        if let Some(dir) = &self.dataset {
            c.data = DataSource::Dataset(dir.clone());
        }
        if let Some(path) = &self.manifest {
            c.data = DataSource::Manifest(path.clone());
        }
        if let Some(seed) = self.seed {
            match &mut c.data {
                DataSource::Generate(spec) => spec.seed = seed,
                _ => log::warn!("--seed only applies to generated data; ignored"),
            }
        }
        if let Some(seeds) = &self.seeds {
            c.train.seeds = seeds.clone();
        }
        if let Some(model) = self.model {
            c.train.model = model;
            c.models = Some(vec![model]);
        }
        if let Some(beta) = self.beta {
            c.train.beta = beta;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        if let Some(k) = self.latent_dim {
            c.train.hyper.latent_dim = k;
        }
        if let Some(lr) = self.lr {
            c.train.lr = lr;
        }
        if let Some(e) = self.epochs {
            c.train.max_epochs = e;
        }
        if let Some(split) = self.split {
            c.metrics.split = split;
        }
        if let Some(out) = &self.out {
            c.out = Some(out.clone());
        }
        if let Some(jobs) = self.jobs {
            c.jobs = Some(jobs);
        }
        if c.jobs == Some(1) {
            c.execution = Execution::Sequential;
        }
        if self.timing {
            c.train.record_timing = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn out_dir(c: &ExperimentConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn fmt_metric(report: &MetricsReport, idx: usize) -> String {
    match (report.aggregate.values()[idx], report.runs.as_slice()) {
        (Some(a), _) => format!("{:.4} [{:.4}, {:.4}]", a.mean, a.ci_low, a.ci_high),
        (None, [only]) => only.values()[idx].map_or("-".into(), |v| format!("{v:.4}")),
        _ => "-".into(),
    }
}

fn print_report(report: &MetricsReport) {
    println!("{} on {} (seeds {:?})", report.model, report.split, report.provenance.seeds);
    for (i, name) in RunMetrics::NAMES.iter().enumerate() {
        println!("  {name:12} {}", fmt_metric(report, i));
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Gen(common) => {
            let c = common.resolve()?;
            let out = out_dir(&c);
            let sidecar = experiment::run_gen(&c, &out)?;
            for f in &sidecar.files {
                println!("{}: {} bags, {} instances", f.path, f.bags, f.instances);
            }
            println!("wrote {}", out.display());
        }
        Command::Train(common) => {
            let c = common.resolve()?;
            let out = out_dir(&c);
            for outcome in experiment::run_train(&c, Some(&out))? {
                print_report(&outcome.report);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            dump_scores,
        } => {
            let c = common.resolve()?;
            let out = out_dir(&c);
            let report = experiment::run_eval(&c, &checkpoint, Some(&out), dump_scores.as_deref())?;
            print_report(&report);
            for note in &report.notes {
                println!("  note: {note}");
            }
            if let Some(p) = dump_scores.as_deref().map(Path::display) {
                println!("scores: {p}");
            }
        }
        Command::Audit(common) => {
            let c = common.resolve()?;
            let out = out_dir(&c);
            let report = experiment::run_audit(&c, Some(&out))?;
            println!("{:10} {:>9} {:>9} {:>9}  verdict", "model", "train", "test", "patch-f1");
            for m in &report.models {
                let f1 = m.test_patch_f1.map_or("-".into(), |v| format!("{v:.4}"));
                println!(
                    "{:10} {:>9.4} {:>9.4} {:>9}  {}",
                    m.model, m.train_slide_auc, m.test_slide_auc, f1, m.verdict
                );
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MILBENCH_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
