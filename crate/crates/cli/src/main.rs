use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hfl_core::harness::config::RampConfig;
use hfl_core::harness::{
    fairness_experiment, parse_config, run_experiment, run_sweep, schedule_experiment, seed_dir,
    ExperimentConfig, SweepSpec,
};

#[derive(Parser)]
#[command(
    name = "hfl",
    version,
    about = "Delay-sensitive hierarchical federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config; writes rounds.csv, bounds.csv and summary.csv per seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis: s, cg, association (e.g. 5/25) or schedule (fixed:5, ramp:1:5:1).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-group accuracy of each group trained alone vs in the joint run.
    Fairness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed sync time from the config vs a ramp ending at it, paired seeds.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        /// start,end,step
        #[arg(long)]
        ramp: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut config = parse_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(dir) = out {
        config.output_dir = dir;
    }
    Ok(config)
}

fn parse_ramp(text: &str) -> Result<RampConfig> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("{p:?} is not a number"))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        &[start, end, step] => Ok(RampConfig { start, end, step }),
        _ => bail!("--ramp takes start,end,step"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut config = load(&config, out)?;
            if let Some(seed) = seed {
                config.seeds = vec![seed];
            }
            let outcomes = run_experiment(&config)?;
            for o in outcomes {
                println!(
                    "seed {}: U = {}, f = {}, avg |grad f|^2 = {} (bound {}) -> {}",
                    o.seed,
                    o.summary.rounds,
                    o.summary.final_loss,
                    o.summary.avg_grad_norm_sq,
                    o.theorem2.total,
                    seed_dir(&config.output_dir, o.seed).display()
                );
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let config = load(&config, out)?;
            let spec = SweepSpec::parse(&axis, &values, config.seeds.clone())
                .map_err(anyhow::Error::msg)?;
            let outcome = run_sweep(&config, &spec)?;
            for s in &outcome.summary {
                println!(
                    "{axis} = {}: loss {} ± {}, acc {} ± {} ({} ok, {} failed)",
                    s.point, s.mean_loss, s.se_loss, s.mean_accuracy, s.se_accuracy, s.ok, s.failed
                );
            }
            println!("wrote {}", outcome.dir.join("sweep.csv").display());
        }
        Command::Fairness { config, out } => {
            let config = load(&config, out)?;
            let rows = fairness_experiment(&config)?;
            for r in &rows {
                println!(
                    "seed {} group {} ({} clients): isolated acc {}, hfl acc {}",
                    r.seed,
                    r.group + 1,
                    r.clients,
                    r.isolated_accuracy,
                    r.hfl_accuracy
                );
            }
            println!("wrote {}", config.output_dir.join("fairness.csv").display());
        }
        Command::Schedule { config, ramp, out } => {
            let config = load(&config, out)?;
            let outcome = schedule_experiment(&config, parse_ramp(&ramp)?)?;
            let better = outcome
                .pairs
                .iter()
                .filter(|p| p.ramp_final_accuracy > p.fixed_final_accuracy)
                .count();
            println!(
                "ramp beat fixed on final accuracy in {better} of {} seeds",
                outcome.pairs.len()
            );
            println!("wrote {}", config.output_dir.join("schedule.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
