//! Runs experiments end to end and writes their outputs.
//!
//! An output directory holds:
//!
//! * `experiment.json`: the config that produced it,
//! * `metrics.csv`: `round,scope,seed,accuracy,n_updates,train_ms,aggregate_ms,status`,
//! * `plot.csv`: per `(round, scope)` mean and standard deviation of the
//!   accuracy across seeds,
//! * `model_history.json`: every scope's model after every round, per seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use flaas_core::bundle::DeviceId;
use flaas_core::codec::model_to_b64;
use flaas_core::global::{Coordinator, JobStatus, MetricRow, RoundStatus};
use flaas_core::{ModelParams, Scope};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::{ExperimentConfig, TransportConfig};
use crate::error::SimError;
use crate::population::{drops_out, Population, SimDevice};
use crate::transport::{model_history, Http, InProcess, Submitted, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundTiming {
    pub train_ms: f64,
    pub aggregate_ms: f64,
}

/// One seeded run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub job_id: String,
    pub metrics: Vec<MetricRow>,
    pub timings: BTreeMap<u64, RoundTiming>,
    /// Models by round, round 0 being the initial model.
    pub history: Vec<BTreeMap<Scope, ModelParams>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub scope: Scope,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub n_updates: usize,
    pub train_ms: f64,
    pub aggregate_ms: f64,
    pub status: RoundStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub round: u64,
    pub scope: Scope,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub records: Vec<MetricsRecord>,
    pub plot: Vec<PlotRow>,
}

impl ExperimentResult {
    pub fn metrics_csv(&self) -> Result<String, SimError> {
        to_csv(&self.records)
    }

    pub fn plot_csv(&self) -> Result<String, SimError> {
        to_csv(&self.plot)
    }

    /// Mean accuracy of `scope` at `round` across seeds.
    pub fn mean_accuracy(&self, scope: &Scope, round: u64) -> Option<f64> {
        self.plot
            .iter()
            .find(|p| p.round == round && &p.scope == scope)
            .map(|p| p.mean_accuracy)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, SimError> {
    let mut out = csv::Writer::from_writer(Vec::new());
    for r in rows {
        out.serialize(r).map_err(|e| SimError::Io(std::io::Error::other(e)))?;
    }
    let bytes = out
        .into_inner()
        .map_err(|e| SimError::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs rounds until the job stops or round `stop_after` has closed.
/// Selected devices that do not drop out train in parallel and submit in
/// ascending device order; the round is then closed explicitly unless the
/// last submission already closed it.
pub fn drive_job(
    transport: &dyn Transport,
    job_id: &str,
    devices: &mut [SimDevice],
    dropout: (u64, f64),
    workers: usize,
    stop_after: Option<u64>,
) -> Result<BTreeMap<u64, RoundTiming>, SimError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let mut timings = BTreeMap::new();
    loop {
        let view = transport.job(job_id)?;
        let Some(round) = view.current_round else { break };
        if view.status != JobStatus::Running || stop_after.is_some_and(|s| round > s) {
            break;
        }
        let selected: BTreeSet<DeviceId> = transport.selection(job_id, round)?.into_iter().collect();
        let globals = view
            .scopes
            .iter()
            .map(|s| Ok((s.clone(), transport.download(job_id, s, round - 1)?)))
            .collect::<Result<BTreeMap<_, _>, SimError>>()?;
        let active: BTreeSet<DeviceId> = selected
            .iter()
            .copied()
            .filter(|&d| !drops_out(dropout.0, round, d, dropout.1))
            .collect();
        let train = view.config.train;

        let started = Instant::now();
        let bundles = pool.install(|| {
            devices
                .par_iter_mut()
                .filter(|d| active.contains(&d.id()))
                .map(|d| d.train_round(round, &globals, &train))
                .collect::<flaas_core::Result<Vec<_>>>()
        })?;
        let trained = Instant::now();
        for bundle in bundles.into_iter().flatten() {
            if let Submitted::Rejected(code) = transport.submit(job_id, round, &bundle)? {
                warn!(job = job_id, round, device = bundle.device_id, %code, "update rejected");
            }
        }
        let after = transport.job(job_id)?;
        if after.current_round == Some(round) {
            transport.close_round(job_id, round)?;
        }
        let closed = Instant::now();
        timings.insert(
            round,
            RoundTiming {
                train_ms: (trained - started).as_secs_f64() * 1e3,
                aggregate_ms: (closed - trained).as_secs_f64() * 1e3,
            },
        );
        info!(
            job = job_id,
            round,
            selected = selected.len(),
            active = active.len(),
            "round done"
        );
    }
    Ok(timings)
}

/// Builds the population for `seed`, creates its job and runs it to the end.
pub fn run_seed(config: &ExperimentConfig, transport: &dyn Transport, seed: u64) -> Result<SeedRun, SimError> {
    let mut population = Population::build(config, seed)?;
    let job_id = transport.create_job(&population.job)?;
    info!(job = %job_id, seed, "job created");
    let timings = drive_job(
        transport,
        &job_id,
        &mut population.devices,
        (seed, config.dropout_prob),
        config.workers,
        None,
    )?;
    let history = model_history(transport, &job_id)?;
    let metrics = transport.metrics(&job_id)?;
    transport.terminate(&job_id)?;
    Ok(SeedRun {
        seed,
        job_id,
        metrics,
        timings,
        history,
    })
}

/// Transport described by the config. In-process runs get a fresh
/// coordinator.
pub fn make_transport(config: &TransportConfig) -> Result<Box<dyn Transport>, SimError> {
    Ok(match config {
        TransportConfig::InProcess => Box::new(InProcess::new(Arc::new(Coordinator::in_memory()))),
        TransportConfig::Http {
            url,
            customer_token,
            device_token,
        } => Box::new(Http::new(url, customer_token, device_token)?),
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, SimError> {
    let transport = make_transport(&config.transport)?;
    run_experiment_with(config, transport.as_ref())
}

pub fn run_experiment_with(config: &ExperimentConfig, transport: &dyn Transport) -> Result<ExperimentResult, SimError> {
    config.validate()?;
    let runs = config
        .seeds
        .iter()
        .map(|&seed| run_seed(config, transport, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let result = summarize(config, runs);
    if let Some(dir) = &config.output_dir {
        write_outputs(config, &result, dir)?;
    }
    Ok(result)
}

fn summarize(config: &ExperimentConfig, runs: Vec<SeedRun>) -> ExperimentResult {
    let mut records = Vec::new();
    let mut by_point: BTreeMap<(u64, Scope), Vec<f64>> = BTreeMap::new();
    for run in &runs {
        for m in &run.metrics {
            let timing = if config.record_timing {
                run.timings.get(&m.round).copied().unwrap_or_default()
            } else {
                RoundTiming::default()
            };
            records.push(MetricsRecord {
                round: m.round,
                scope: m.scope.clone(),
                seed: run.seed,
                accuracy: m.accuracy,
                n_updates: m.n_updates,
                train_ms: timing.train_ms,
                aggregate_ms: timing.aggregate_ms,
                status: m.status,
            });
            if let Some(a) = m.accuracy {
                by_point.entry((m.round, m.scope.clone())).or_default().push(a);
            }
        }
    }
    let plot = by_point
        .into_iter()
        .map(|((round, scope), accs)| {
            let (mean, std) = mean_std(&accs);
            PlotRow {
                round,
                scope,
                mean_accuracy: mean,
                std_accuracy: std,
                runs: accs.len(),
            }
        })
        .collect();
    ExperimentResult { runs, records, plot }
}

#[derive(Serialize)]
struct HistoryDoc<'a> {
    seeds: Vec<SeedHistory<'a>>,
}

#[derive(Serialize)]
struct SeedHistory<'a> {
    seed: u64,
    job_id: &'a str,
    rounds: Vec<BTreeMap<&'a Scope, String>>,
}

pub fn write_outputs(config: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let echo = serde_json::to_string_pretty(config).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("experiment.json"), echo)?;
    std::fs::write(dir.join("metrics.csv"), result.metrics_csv()?)?;
    std::fs::write(dir.join("plot.csv"), result.plot_csv()?)?;
    let history = HistoryDoc {
        seeds: result
            .runs
            .iter()
            .map(|r| SeedHistory {
                seed: r.seed,
                job_id: &r.job_id,
                rounds: r
                    .history
                    .iter()
                    .map(|models| models.iter().map(|(s, m)| (s, model_to_b64(m, false))).collect())
                    .collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&history).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("model_history.json"), text)?;
    Ok(())
}
