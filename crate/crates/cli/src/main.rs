use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rss_cli::commands;
use rss_cli::records::{self, write_json};
use rss_cli::report::{self, SelectBy};
use rss_cli::sweep::{self, Experiment, SweepOptions};
use rss_cli::{ExperimentConfig, Precision};
use rss_core::losses::Variant;

#[derive(Parser)]
#[command(name = "rss", version, about = "Train and evaluate robust, sparse and stable ReLU classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
}

#[derive(clap::Args)]
struct Selection {
    /// Restrict to one variant, e.g. `nominal` or `full`.
    #[arg(long)]
    variant: Option<Variant>,
    /// Position among the matching grid points.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one grid point for one seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Selection,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every grid point for every seed; completed runs are skipped.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `output` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Attack a saved model on the test rows of a run.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Seed of the run that produced the model.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Radii; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        radii: Option<Vec<f64>>,
        /// Write the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build report tables from one or more sweep directories.
    Report {
        /// Sweep output directories, one per dataset.
        #[arg(long = "records", required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// `natural` or `adv:<radius>`.
        #[arg(long, default_value = "natural")]
        mode: SelectBy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble stability score of one grid point over the config's seeds.
    Stability {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Selection,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(path: &Path) -> Result<Experiment> {
    let cfg = ExperimentConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Experiment::load(cfg, base)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, select, seed, out } => {
            let exp = experiment(&common.config)?;
            let spec = commands::pick_spec(&exp, select.variant, select.index)?;
            let metrics = commands::train(&exp, &spec, seed, common.precision.into(), &out)?;
            print_json(&metrics)?;
        }
        Command::Sweep { common, out, jobs } => {
            let exp = experiment(&common.config)?;
            let out = out.or_else(|| exp.cfg.output.clone()).context("no output directory: pass --out or set `output`")?;
            let opts = SweepOptions { out, jobs, precision: common.precision.into() };
            let s = sweep::sweep(&exp, &opts)?;
            eprintln!(
                "{} configurations: {} runs executed ({} failed), {} already complete",
                s.configs, s.executed, s.failed, s.skipped
            );
            print!("{}", std::fs::read_to_string(opts.out.join("report/table.txt"))?);
        }
        Command::AttackEval { common, model, seed, radii, out } => {
            let exp = experiment(&common.config)?;
            let radii = radii.unwrap_or_else(|| exp.cfg.attack.radii.clone());
            let metrics = commands::attack_eval(&exp, &model, seed, &radii, common.precision.into())?;
            match out {
                Some(p) => write_json(&p, &metrics)?,
                None => print_json(&metrics)?,
            }
        }
        Command::Report { records: dirs, mode, out } => {
            let sets = dirs.iter().map(|d| records::load_records(d)).collect::<Result<Vec<_>>>()?;
            let files = report::build(&sets, &mode)?;
            for w in &files.warnings {
                eprintln!("warning: {w}");
            }
            files.write(&out)?;
            print!("{}", files.table_txt);
        }
        Command::Stability { common, select, out } => {
            let exp = experiment(&common.config)?;
            let spec = commands::pick_spec(&exp, select.variant, select.index)?;
            let res = commands::stability(&exp, &spec, common.precision.into())?;
            match out {
                Some(p) => write_json(&p, &res)?,
                None => print_json(&res)?,
            }
        }
    }
    Ok(())
}
