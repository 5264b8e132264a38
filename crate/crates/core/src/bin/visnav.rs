use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use visnav_mpc::experiments::{parse_conditions, run_campaign, summarize, write_campaign, ScenarioConfig};
use visnav_mpc::gradcheck::run_suites;
use visnav_mpc::ocp::OcpConfig;
use visnav_mpc::sim::{EpisodeLog, SimConfig};
use visnav_mpc::Result;

#[derive(Parser)]
#[command(name = "visnav", version, about = "Perception-aware NMPC simulation campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign and write reports, logs and plot series.
    Run {
        /// Scenario configuration (JSON). Defaults are used when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Controller configuration (JSON).
        #[arg(long)]
        ocp: Option<PathBuf>,
        /// Simulation configuration (JSON).
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the scenario and the simulation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Comma-separated `static` or `delay:velocity` entries.
        #[arg(long)]
        conditions: Option<String>,
    },
    /// Recompute episode metrics from a stored per-episode CSV log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Simulation configuration used for the success thresholds.
        #[arg(long)]
        sim: Option<PathBuf>,
    },
    /// Compare analytic derivatives with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            scenario,
            ocp,
            sim,
            out,
            seed,
            workers,
            conditions,
        } => {
            let mut scenario_cfg: ScenarioConfig = load(scenario.as_deref())?;
            let ocp_cfg: OcpConfig = load(ocp.as_deref())?;
            let mut sim_cfg: SimConfig = load(sim.as_deref())?;
            if let Some(s) = seed {
                scenario_cfg.seed = s;
                sim_cfg.seed = s;
            }
            let conditions = match conditions {
                Some(c) => parse_conditions(&c)?,
                None => scenario_cfg.default_conditions(),
            };
            let run = run_campaign(&scenario_cfg, &ocp_cfg, &sim_cfg, &conditions, workers)?;
            write_campaign(&run, &out)?;
            for row in &run.report.rows {
                println!(
                    "{:<20} failure {:5.1}%  avg px {:>7}  max px {:>7}",
                    row.condition,
                    row.failure_rate,
                    row.avg_pixel_error.map_or("-".into(), |v| format!("{v:.1}")),
                    row.max_pixel_error.map_or("-".into(), |v| format!("{v:.1}")),
                );
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Replay { log, sim } => {
            let sim_cfg: SimConfig = load(sim.as_deref())?;
            let records = EpisodeLog::read_records(fs::File::open(&log)?)?;
            let id = log
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("episode_"))
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            let episode = EpisodeLog::from_records(id, records, &sim_cfg);
            println!("{}", serde_json::to_string_pretty(&summarize(&episode))?);
            Ok(true)
        }
        Command::Gradcheck {
            samples,
            seed,
            tolerance,
        } => {
            let mut ok = true;
            for suite in run_suites(samples, seed) {
                let pass = suite.passed(tolerance);
                ok &= pass;
                println!(
                    "{:<14} samples {:>4}  max rel error {:.3e}  {}",
                    suite.name,
                    suite.samples,
                    suite.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
