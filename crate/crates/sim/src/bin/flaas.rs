use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use flaas_server::ServerConfig;
use flaas_sim::config::TransportConfig;
use flaas_sim::device::run_device;
use flaas_sim::population::Population;
use flaas_sim::transport::Http;
use flaas_sim::{compare_scenarios, report, run_experiment, ExperimentConfig, SimError};
use tracing_subscriber::EnvFilter;

/// Federated learning as a service: server, experiments and devices.
#[derive(Debug, Parser)]
#[command(name = "flaas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an experiment and write its outputs.
    Experiment {
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run against a server instead of in process.
        #[arg(long, requires = "token")]
        server: Option<String>,
        /// Customer token for `--server`.
        #[arg(long)]
        token: Option<String>,
        /// Device token pattern for `--server`; `{id}` is the device id.
        #[arg(long, default_value = "device-{id}")]
        device_token: String,
    },
    /// Take part in a job as one simulated device.
    Device {
        #[arg(long = "join")]
        job: String,
        #[arg(long)]
        server: String,
        #[arg(long)]
        token: String,
        /// Experiment config describing the device's data.
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        device: u32,
        /// Data seed; the first seed of the experiment when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        poll_ms: u64,
        /// Give up after this long without a new round.
        #[arg(long, default_value_t = 600)]
        idle_secs: u64,
    },
    /// Summarize an experiment directory.
    Report {
        dir: PathBuf,
        #[arg(long)]
        csv: bool,
    },
    /// Compare two experiment configs over paired seeds.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("FLAAS_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flaas: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<(), SimError> {
    match command {
        Command::Serve { config } => serve(config),
        Command::Experiment {
            config,
            out,
            server,
            token,
            device_token,
        } => {
            let mut config = ExperimentConfig::load(&config)?;
            if out.is_some() {
                config.output_dir = out;
            }
            if let (Some(url), Some(customer_token)) = (server, token) {
                config.transport = TransportConfig::Http {
                    url,
                    customer_token,
                    device_token,
                };
            }
            let result = run_experiment(&config)?;
            print!("{}", report::render(&result.records, false));
            if let Some(dir) = &config.output_dir {
                println!("outputs written to {}", dir.display());
            }
            Ok(())
        }
        Command::Device {
            job,
            server,
            token,
            experiment,
            device,
            seed,
            poll_ms,
            idle_secs,
        } => {
            let config = ExperimentConfig::load(&experiment)?;
            if device >= config.devices {
                return Err(SimError::Config(format!(
                    "device {device} is outside 0..{}",
                    config.devices
                )));
            }
            let seed = seed.unwrap_or(config.seeds[0]);
            let mut population = Population::build(&config, seed)?;
            let mut me = population.devices.swap_remove(device as usize);
            let transport = Http::new(&server, &token, &token)?;
            let summary = run_device(
                &transport,
                &job,
                &mut me,
                Duration::from_millis(poll_ms),
                Duration::from_secs(idle_secs),
            )?;
            println!(
                "device {device}: {} rounds seen, {} submitted, {} rejected",
                summary.rounds_seen, summary.rounds_submitted, summary.rejected
            );
            Ok(())
        }
        Command::Report { dir, csv } => {
            let rows = report::read_metrics(&dir)?;
            print!("{}", report::render(&rows, csv));
            Ok(())
        }
        Command::Compare { a, b, repeats } => {
            let a = ExperimentConfig::load(&a)?;
            let b = ExperimentConfig::load(&b)?;
            println!("{}", compare_scenarios(&a, &b, repeats)?);
            Ok(())
        }
    }
}

fn serve(path: PathBuf) -> Result<(), SimError> {
    let config = ServerConfig::load(&path).map_err(|e| SimError::Config(e.to_string()))?;
    let coordinator = flaas_server::open_coordinator(&config).map_err(|e| SimError::Config(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .map_err(|e| SimError::Network(format!("cannot listen on {}: {e}", config.listen)))?;
        // Tests and scripts read the bound address from this line.
        println!("listening on {}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        flaas_server::serve(listener, coordinator, config, shutdown).await?;
        Ok(())
    })
}
