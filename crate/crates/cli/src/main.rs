use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use metamtl::experiment::{self, ExperimentConfig, RunReport};
use metamtl::nn::ModelParams;
use std::path::PathBuf;
use std::process::ExitCode;

/// Multi-task training with clustered auxiliary tasks.
#[derive(Parser)]
#[command(name = "metamtl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print metric differences (b − a) between two run reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Distances between shared representations of example pairs under two
    /// checkpoints, as CSV.
    Probe {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// CSV of `i,j` example index pairs.
        #[arg(long)]
        pairs: PathBuf,
        /// MNIST directory (test split is used) or a DSET file.
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let report = experiment::run(&cfg)?;
    for (split, acc) in &report.accuracy {
        println!("accuracy.{split}\t{acc:.6}");
    }
    for (t, nmi) in report.partition_nmi.iter().enumerate() {
        println!("partition_nmi.{}\t{nmi:.6}", t + 1);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(dir) = &report.run_dir {
        println!("run_dir\t{}", dir.display());
    }
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf) -> Result<()> {
    let ra = RunReport::load(&a)?;
    let rb = RunReport::load(&b)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    println!("metric,a,b,delta");
    for row in experiment::compare(&ra, &rb)? {
        println!("{},{},{},{}", row.metric, cell(row.a), cell(row.b), cell(row.delta));
    }
    Ok(())
}

fn probe(a: PathBuf, b: PathBuf, pairs: PathBuf, data: PathBuf) -> Result<()> {
    let ma = ModelParams::load(&a).with_context(|| format!("loading {}", a.display()))?;
    let mb = ModelParams::load(&b).with_context(|| format!("loading {}", b.display()))?;
    let pairs = experiment::read_pairs(&std::fs::read_to_string(&pairs)?)?;
    let data = experiment::load_probe_dataset(&data)?;
    println!("i,j,dist_a,dist_b");
    for r in experiment::ambiguity_probe(&ma, &mb, &data, &pairs)? {
        println!("{},{},{:.6},{:.6}", r.i, r.j, r.dist_a, r.dist_b);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    metamtl::parallel::init_thread_pool(metamtl::parallel::thread_cap_from_env());
    let result = match cli.command {
        Command::Run { config, seed, out } => run(config, seed, out),
        Command::Compare { a, b } => compare(a, b),
        Command::Probe { a, b, pairs, data } => probe(a, b, pairs, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
