use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feddm_cli::commands::{calibrate_dp, msgsize_fixture, msgsize_for_data, partition_stats, render};
use feddm_cli::experiment::load_data;
use feddm_cli::{parse_config, run_experiment, ExperimentConfig, Failure, Manifest};
use feddm_core::accounting::PayloadReport;

#[derive(Parser)]
#[command(name = "feddm", version, about = "Federated learning with distribution matching: simulator and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write history.csv, config.toml and manifest.json.
    Run {
        /// Experiment config (flat TOML).
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Re-run the configuration recorded in a manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Client worker threads (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Floats uploaded per round.
    Msgsize {
        /// Derive the split from an experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use a stored ten-client fixture instead.
        #[arg(long, conflicts_with = "config")]
        fixture: Option<String>,
        /// Classes per client, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["config", "fixture"])]
        cpc: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        ipc: usize,
        /// Floats per example (with --cpc).
        #[arg(long, default_value_t = 784)]
        floats: usize,
        /// Parameter count for a weight payload (with --cpc).
        #[arg(long)]
        params: Option<usize>,
        #[arg(long, default_value_t = 1)]
        rounds: u64,
        #[arg(long)]
        csv: bool,
    },
    /// Gaussian-mechanism and DP-SGD noise multipliers.
    CalibrateDp {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        /// Sampling rate.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Per-client class histograms of a Dirichlet split.
    PartitionStats {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => Ok(parse_config(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            manifest,
            seed,
            out,
            workers,
        } => {
            let mut cfg = match (config, manifest) {
                (_, Some(m)) => Manifest::load(&m)?.config,
                (c, None) => load_config(c.as_ref())?,
            };
            if let Some(s) = seed {
                cfg.seed = i64::try_from(s).map_err(|_| Failure::Config(format!("invalid `seed`: {s} is too large")))?;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(w) = workers {
                cfg.workers = w as i64;
            }
            cfg.validate()?;
            let history = run_experiment(&cfg)?;
            println!(
                "{} finished {} rounds: test accuracy {:.4}, {} floats uploaded; artifacts in {}",
                cfg.protocol,
                history.records.len(),
                history.final_accuracy(),
                history.records.last().map_or(0, |r| r.cumulative_floats),
                cfg.out_dir.display()
            );
            Ok(())
        }
        Command::Msgsize {
            config,
            fixture,
            cpc,
            ipc,
            floats,
            params,
            rounds,
            csv,
        } => {
            if let Some(name) = fixture {
                print!("{}", render(&msgsize_fixture(&name, rounds)?, csv));
                return Ok(());
            }
            if !cpc.is_empty() {
                print!("{}", render(&PayloadReport::synthetic(&cpc, ipc, floats).over_rounds(rounds), csv));
                if let Some(p) = params {
                    print!("{}", render(&PayloadReport::weights(p, cpc.len()).over_rounds(rounds), csv));
                }
                return Ok(());
            }
            let cfg = load_config(config.as_ref())?;
            let (train, _) = load_data(&cfg)?;
            let fed = cfg.fed_config()?;
            let arch = cfg.architecture(train.example_shape(), train.num_classes())?;
            let (syn, weights) = msgsize_for_data(
                &train,
                fed.clients,
                fed.alpha,
                fed.seed,
                fed.client.ipc,
                arch.param_count(),
                rounds,
            )?;
            print!("{}", render(&syn, csv));
            print!("{}", render(&weights, csv));
            Ok(())
        }
        Command::CalibrateDp { epsilon, delta, q, steps } => {
            print!("{}", calibrate_dp(epsilon, delta, q, steps)?);
            Ok(())
        }
        Command::PartitionStats {
            config,
            alpha,
            clients,
            seed,
        } => {
            let cfg = load_config(config.as_ref())?;
            let fed = cfg.fed_config()?;
            let alpha = alpha.unwrap_or(fed.alpha);
            if !(alpha > 0.0) {
                return Err(Failure::Config(format!("invalid `alpha`: must be positive, got {alpha}")));
            }
            let (train, _) = load_data(&cfg)?;
            print!(
                "{}",
                partition_stats(&train, clients.unwrap_or(fed.clients), alpha, seed.unwrap_or(fed.seed))?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
