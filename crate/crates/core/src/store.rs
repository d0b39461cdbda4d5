//! On-disk layout of a job.
//!
//! ```text
//! <root>/<job_id>/config.json      job config, owner, permission registry
//! <root>/<job_id>/state.json       status, budget, last closed round
//! <root>/<job_id>/rounds/<r>.json  selection, raw updates, models, metrics
//! <root>/<job_id>/metrics.csv      one row per (round, scope)
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundle::{DeviceId, UploadBundle, WireBundle};
use crate::codec::model_from_b64;
use crate::error::{Error, Result};
use crate::global::{aggregate_round, JobConfig, JobStatus, MetricRow, RoundStatus};
use crate::model::{init_model, ModelParams};
use crate::permissions::{PermissionRegistry, Scope};

const CONFIG_FILE: &str = "config.json";
const STATE_FILE: &str = "state.json";
const METRICS_FILE: &str = "metrics.csv";
const ROUNDS_DIR: &str = "rounds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDocument {
    pub config: JobConfig,
    pub owner: String,
    pub registry: PermissionRegistry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDocument {
    pub status: JobStatus,
    pub budget_rounds: u64,
    pub last_closed: u64,
}

/// Everything recorded about one closed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub status: RoundStatus,
    pub selected: Vec<DeviceId>,
    pub updates: Vec<WireBundle>,
    /// Uncompressed canonical layout, base64.
    pub models: BTreeMap<Scope, String>,
    pub metrics: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobStore {
    dir: PathBuf,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    round: u64,
    scope: &'a Scope,
    accuracy: Option<f64>,
    n_updates: usize,
    status: RoundStatus,
}

impl JobStore {
    /// Creates the directory of a new job. Fails if it already exists.
    pub fn create(root: &Path, job_id: &str) -> Result<Self> {
        let dir = root.join(job_id);
        if dir.exists() {
            return Err(Error::Storage(format!("{} already exists", dir.display())));
        }
        fs::create_dir_all(dir.join(ROUNDS_DIR))?;
        Ok(Self { dir })
    }

    /// Opens an existing job directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.join(CONFIG_FILE).is_file() {
            return Err(Error::NotFound(format!("no job at {}", dir.display())));
        }
        Ok(Self { dir })
    }

    /// Every job directory under `root`, in name order.
    pub fn discover(root: &Path) -> Result<Vec<Self>> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(CONFIG_FILE).is_file())
            .collect();
        dirs.sort();
        Ok(dirs.into_iter().map(|dir| Self { dir }).collect())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    fn round_path(&self, round: u64) -> PathBuf {
        self.dir.join(ROUNDS_DIR).join(format!("{round}.json"))
    }

    /// Best-effort removal, used when job creation fails half way.
    pub(crate) fn remove(&self) {
        let _ = fs::remove_dir_all(&self.dir);
    }

    pub fn write_document(&self, doc: &JobDocument) -> Result<()> {
        write_json(&self.dir.join(CONFIG_FILE), doc)
    }

    pub fn read_document(&self) -> Result<JobDocument> {
        read_json(&self.dir.join(CONFIG_FILE))
    }

    pub fn write_state(&self, state: &StateDocument) -> Result<()> {
        write_json(&self.dir.join(STATE_FILE), state)
    }

    pub fn read_state(&self) -> Result<StateDocument> {
        read_json(&self.dir.join(STATE_FILE))
    }

    pub fn write_round(&self, log: &RoundLog) -> Result<()> {
        write_json(&self.round_path(log.round), log)
    }

    pub fn read_round(&self, round: u64) -> Result<RoundLog> {
        read_json(&self.round_path(round))
    }

    pub fn write_metrics(&self, rows: &[MetricRow]) -> Result<()> {
        let mut out = csv::Writer::from_writer(Vec::new());
        for r in rows {
            out.serialize(CsvRow {
                round: r.round,
                scope: &r.scope,
                accuracy: r.accuracy,
                n_updates: r.n_updates,
                status: r.status,
            })
            .map_err(|e| Error::Storage(e.to_string()))?;
        }
        let bytes = out.into_inner().map_err(|e| Error::Storage(e.to_string()))?;
        write_atomic(&self.metrics_path(), &bytes)
    }
}

/// Re-derives every closed round's models from the initial model and the
/// logged raw updates alone. Returns the first round whose logged models
/// differ bit-for-bit from the recomputation, or `None` when all match.
pub fn verify_history(store: &JobStore) -> Result<Option<u64>> {
    let doc = store.read_document()?;
    let state = store.read_state()?;
    let scopes = doc.config.scenario.scopes();
    let init = init_model(doc.config.feature_dim, doc.config.num_classes, doc.config.seed)?;
    let mut previous: BTreeMap<Scope, ModelParams> = scopes.iter().map(|s| (s.clone(), init.clone())).collect();
    for r in 1..=state.last_closed {
        let log = store.read_round(r)?;
        let updates = log
            .updates
            .iter()
            .map(|w| Ok((w.device_id, UploadBundle::from_wire(w)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let (recomputed, _) = aggregate_round(&scopes, &previous, &updates)?;
        let logged = log
            .models
            .iter()
            .map(|(s, b64)| Ok((s.clone(), model_from_b64(b64, false)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let identical = recomputed.len() == logged.len()
            && recomputed.iter().all(|(s, m)| {
                logged
                    .get(s)
                    .is_some_and(|l| l.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
            });
        if !identical {
            return Ok(Some(r));
        }
        previous = recomputed;
    }
    Ok(None)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_vec_pretty(value)?;
    write_atomic(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::Storage(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&text)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::UploadEntry;
    use crate::global::{Job, JobConfig, Requester, Scenario};
    use crate::model::TrainConfig;
    use crate::permissions::AppId;

    fn config() -> JobConfig {
        JobConfig {
            job_id: "persisted".into(),
            scenario: Scenario::SingleApp {
                apps: vec![AppId::new("a").unwrap()],
            },
            rounds: 4,
            client_fraction: 1.0,
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                learning_rate: 0.1,
                seed: 0,
            },
            feature_dim: 3,
            num_classes: 2,
            round_timeout_secs: 10.0,
            max_budget_rounds: 4,
            seed: 7,
            devices: vec![0, 1],
            grants: Vec::new(),
            observers: Vec::new(),
            test_set: None,
            schema: None,
            parameter_self_tuning: false,
        }
    }

    fn submit(job: &mut Job, round: u64, device: DeviceId, shift: f64) {
        let scope = Scope::app("a").unwrap();
        let base = job.latest_models()[&scope].clone();
        let w: Vec<f64> = base.weights().iter().map(|v| v + shift).collect();
        let model = ModelParams::from_parts(3, 2, w, base.biases().to_vec()).unwrap();
        let bundle = UploadBundle {
            device_id: device,
            round,
            compressed: device % 2 == 1,
            entries: vec![UploadEntry {
                scope,
                model,
                sample_count: 3 + device as u64,
            }],
        };
        job.submit_update(round, bundle).unwrap();
    }

    #[test]
    fn restore_resumes_and_history_verifies() {
        let root = tempfile::tempdir().unwrap();
        let store = JobStore::create(root.path(), "persisted").unwrap();
        let mut job = Job::create(config(), "owner", Some(store.clone())).unwrap();
        for r in 1..=2 {
            submit(&mut job, r, 0, 0.1 * r as f64);
            submit(&mut job, r, 1, -0.3);
            job.close_round(r).unwrap();
        }
        // A half-finished round 3 is lost on restart.
        submit(&mut job, 3, 0, 1.0);
        let before: Vec<_> = job.model_history().to_vec();
        drop(job);

        let restored = Job::restore(JobStore::open(root.path().join("persisted")).unwrap()).unwrap();
        assert_eq!(restored.model_history(), &before[..]);
        assert_eq!(restored.current_round(), Some(3));
        assert!(restored.open_round_state().unwrap().updates.is_empty());
        assert_eq!(restored.metrics().len(), 2);
        let scope = Scope::app("a").unwrap();
        restored.global_model(&scope, 2, &Requester::Participant).unwrap();
        assert_eq!(verify_history(&store).unwrap(), None);

        let csv = fs::read_to_string(store.metrics_path()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "round,scope,accuracy,n_updates,status");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn tampered_log_is_detected() {
        let root = tempfile::tempdir().unwrap();
        let store = JobStore::create(root.path(), "persisted").unwrap();
        let mut job = Job::create(config(), "owner", Some(store.clone())).unwrap();
        submit(&mut job, 1, 0, 0.5);
        job.close_round(1).unwrap();
        let mut log = store.read_round(1).unwrap();
        log.updates[0].entries[0].n += 1;
        let other = store.read_round(1).unwrap();
        store.write_round(&log).unwrap();
        // A single update is its own average whatever its count, so change
        // the payload instead.
        assert_eq!(verify_history(&store).unwrap(), None);
        let mut log = other;
        let scope = Scope::app("a").unwrap();
        log.models.insert(
            scope,
            crate::codec::model_to_b64(&ModelParams::zeros(3, 2).unwrap(), false),
        );
        store.write_round(&log).unwrap();
        assert_eq!(verify_history(&store).unwrap(), Some(1));
    }

    #[test]
    fn duplicate_directory_rejected() {
        let root = tempfile::tempdir().unwrap();
        JobStore::create(root.path(), "x").unwrap();
        assert!(matches!(JobStore::create(root.path(), "x"), Err(Error::Storage(_))));
        assert!(JobStore::open(root.path().join("x")).is_err());
    }
}
