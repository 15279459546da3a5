use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use burden_core::controllers::oracle_policy;
use burden_core::experiment::{
    emit_policy_sweep, group_by_replication, metrics_from_rows, read_step_rows, run_experiment, write_outputs,
    write_sweep_csv, ExperimentConfig, MetricsSeries, SweepConfig,
};
use burden_core::model::PatientParams;

#[derive(Parser)]
#[command(name = "burden", version, about = "Adaptive treatment-burden experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated controller experiments from a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve and classify optimal policies across values of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics from a stored per-step CSV.
    Metrics {
        /// The experiment config the trajectories came from.
        config: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(config: &Path, out: Option<PathBuf>, jobs: Option<usize>, seed: Option<u64>) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("building thread pool")?;
    info!(
        "running {} controllers x {} replications, horizons {:?}",
        cfg.controllers.len(),
        cfg.replications,
        cfg.horizons
    );
    let results = pool.install(|| run_experiment(&cfg))?;
    let files = write_outputs(&results, &dir)?;
    info!("wrote {} files to {}", files.len(), dir.display());
    let failures = results.failure_count();
    if failures > 0 {
        eprintln!("{failures} replication(s) failed; see summary.json");
    }
    Ok(failures == 0)
}

fn sweep(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = SweepConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let points = emit_policy_sweep(&cfg.patient, cfg.sweep.parameter, &cfg.sweep.values, &cfg.vi)?;
    let dir = out.unwrap_or(cfg.output_dir);
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("sweep_{}.csv", cfg.sweep.parameter.as_str()));
    write_sweep_csv(&points, fs::File::create(&path)?)?;
    for p in &points {
        println!(
            "{} = {}: {} {:?}",
            cfg.sweep.parameter.as_str(),
            p.value,
            p.kind.as_str(),
            p.thresholds
        );
    }
    info!("wrote {}", path.display());
    Ok(())
}

fn metrics(config: &Path, trajectories: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let params = PatientParams::new(cfg.patient)?;
    let oracle = oracle_policy(&params, &cfg.vi)?;
    let file = fs::File::open(trajectories).with_context(|| format!("opening {}", trajectories.display()))?;
    let groups = group_by_replication(read_step_rows(file)?);
    if groups.is_empty() {
        bail!("{} contains no rows", trajectories.display());
    }
    let len = groups[0].1.len();
    if groups.iter().any(|(_, g)| g.len() != len) {
        bail!("replications have different lengths");
    }
    let series: Vec<MetricsSeries> = groups.iter().map(|(_, g)| metrics_from_rows(g, &oracle)).collect();
    let mean = MetricsSeries::mean(&series);
    match out {
        Some(path) => mean.write_csv(fs::File::create(path)?)?,
        None => mean.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            seed,
        } => run(&config, out, jobs, seed),
        Command::Sweep { config, out } => sweep(&config, out).map(|_| true),
        Command::Metrics {
            config,
            trajectories,
            out,
        } => metrics(&config, &trajectories, out).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
