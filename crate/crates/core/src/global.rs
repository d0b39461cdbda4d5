//! Central server module: job lifecycle, per-round client selection, update
//! collection and per-scope Federated Averaging.
//!
//! Rounds are numbered from 1. The model with provenance `r` is the result of
//! aggregating round `r`; provenance 0 is the seeded initial model. While
//! round `r` is open, devices train from the round `r - 1` models.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::aggregate::federated_aggregate;
use crate::bundle::{DeviceId, UploadBundle};
use crate::codec::{model_from_b64, model_to_b64};
use crate::error::{Error, Result};
use crate::local::SharingMode;
use crate::model::{batch_rng, evaluate, init_model, LabeledBatch, ModelParams, TrainConfig};
use crate::permissions::{AppId, Capability, GroupId, PermissionGrant, PermissionRegistry, Scope};
use crate::store::{JobDocument, JobStore, RoundLog, StateDocument};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Every listed app gets its own model.
    SingleApp { apps: Vec<AppId> },
    /// One joint model for a group of apps.
    JointExisting {
        group: GroupId,
        members: Vec<AppId>,
        mode: SharingMode,
    },
    /// A new problem owned by `primary`, helped by `secondaries`.
    JointNew {
        primary: AppId,
        secondaries: Vec<AppId>,
        mode: SharingMode,
    },
}

impl Scenario {
    pub fn scopes(&self) -> Vec<Scope> {
        match self {
            Scenario::SingleApp { apps } => apps.iter().cloned().map(Scope::App).collect(),
            Scenario::JointExisting { group, .. } => vec![Scope::Group(group.clone())],
            Scenario::JointNew { primary, .. } => vec![Scope::App(primary.clone())],
        }
    }

    pub fn apps(&self) -> Vec<AppId> {
        match self {
            Scenario::SingleApp { apps } => apps.clone(),
            Scenario::JointExisting { members, .. } => members.clone(),
            Scenario::JointNew {
                primary, secondaries, ..
            } => std::iter::once(primary.clone())
                .chain(secondaries.iter().cloned())
                .collect(),
        }
    }

    /// Grants the scenario needs before it may run.
    pub fn required_grants(&self) -> Vec<(AppId, Scope, Capability)> {
        match self {
            Scenario::SingleApp { .. } => Vec::new(),
            Scenario::JointExisting { group, members, mode } => members
                .iter()
                .map(|m| (m.clone(), Scope::Group(group.clone()), mode.capability()))
                .collect(),
            Scenario::JointNew {
                primary,
                secondaries,
                mode,
            } => secondaries
                .iter()
                .map(|s| (s.clone(), Scope::App(primary.clone()), mode.capability()))
                .collect(),
        }
    }
}

/// Everything needed to run one federated job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    /// Assigned by the coordinator when left empty.
    #[serde(default)]
    pub job_id: String,
    pub scenario: Scenario,
    pub rounds: u64,
    pub client_fraction: f64,
    pub train: TrainConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub round_timeout_secs: f64,
    pub max_budget_rounds: u64,
    pub seed: u64,
    /// The device population `K` of this job.
    pub devices: Vec<DeviceId>,
    #[serde(default)]
    pub grants: Vec<PermissionGrant>,
    /// Apps outside the scenario that may be granted read access to models.
    #[serde(default)]
    pub observers: Vec<AppId>,
    /// Held-out set every scope's global model is evaluated on after each
    /// round.
    #[serde(default)]
    pub test_set: Option<LabeledBatch>,
    /// Description of the customer's raw data columns.
    #[serde(default)]
    pub schema: Option<DataSchema>,
    #[serde(default)]
    pub parameter_self_tuning: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Real,
    Integer,
    Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ColumnType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSchema {
    pub name: String,
    pub inputs: Vec<Column>,
    pub outputs: Vec<Column>,
}

impl DataSchema {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.outputs.is_empty() {
            return Err(Error::Config(format!(
                "schema {} needs at least one input and one output",
                self.name
            )));
        }
        let mut seen = BTreeSet::new();
        for col in self.inputs.iter().chain(&self.outputs) {
            if col.name.is_empty() || !seen.insert(col.name.as_str()) {
                return Err(Error::Config(format!(
                    "schema column name {:?} is empty or repeated",
                    col.name
                )));
            }
        }
        Ok(())
    }
}

impl JobConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client_fraction {} outside (0, 1]", self.client_fraction));
        }
        if self.max_budget_rounds < self.rounds {
            return bad(format!(
                "budget of {} rounds cannot cover {} rounds",
                self.max_budget_rounds, self.rounds
            ));
        }
        if !(self.round_timeout_secs.is_finite() && self.round_timeout_secs > 0.0) {
            return bad("round_timeout_secs must be positive".into());
        }
        if self.parameter_self_tuning {
            return bad("parameter self-tuning is unsupported".into());
        }
        if let Some(schema) = &self.schema {
            schema.validate()?;
        }
        self.train.validate()?;
        ModelParams::zeros(self.feature_dim, self.num_classes)?;
        if self.devices.is_empty() {
            return bad("a job needs at least one device".into());
        }
        if self.devices.iter().collect::<BTreeSet<_>>().len() != self.devices.len() {
            return bad("device ids must be unique".into());
        }
        let apps = self.scenario.apps();
        if apps.is_empty() {
            return bad("scenario lists no apps".into());
        }
        if apps.iter().collect::<BTreeSet<_>>().len() != apps.len() {
            return bad("scenario apps must be unique".into());
        }
        match &self.scenario {
            Scenario::JointExisting { members, .. } if members.len() < 2 => {
                return bad("a joint job needs at least two member apps".into())
            }
            Scenario::JointNew {
                mode: SharingMode::GradientShare,
                ..
            } => return bad("new-problem jobs use DataShare or ModelShare".into()),
            _ => {}
        }
        if let Some(test) = &self.test_set {
            if test.is_empty() || test.dim() != self.feature_dim {
                return bad("test set must be non-empty and match feature_dim".into());
            }
            if test.labels().iter().any(|&y| y >= self.num_classes) {
                return bad("test set label out of range".into());
            }
        }
        Ok(())
    }

    /// Permission registry of the job: scenario apps, observers, the group
    /// (if any) and the configured grants.
    pub fn registry(&self) -> Result<PermissionRegistry> {
        let mut reg = PermissionRegistry::new();
        for app in self.scenario.apps().into_iter().chain(self.observers.iter().cloned()) {
            reg.register_app(app);
        }
        if let Scenario::JointExisting { group, members, .. } = &self.scenario {
            reg.register_group(group.clone(), members.iter().cloned())?;
        }
        reg.grant_all(&self.grants)?;
        Ok(reg)
    }

    /// Number of devices selected per round, `ceil(C * K)`.
    pub fn clients_per_round(&self) -> usize {
        let k = self.devices.len();
        // The epsilon keeps products such as 0.7 * 10 from rounding up to 8.
        let m = (self.client_fraction * k as f64 - 1e-9).ceil() as usize;
        m.clamp(1, k)
    }
}

/// Fails with the first missing grant the scenario needs.
pub fn check_scenario_permissions(scenario: &Scenario, registry: &PermissionRegistry) -> Result<()> {
    for (source, target, cap) in scenario.required_grants() {
        registry.require(&source, &target, cap)?;
    }
    Ok(())
}

/// `ceil(C * K)` devices drawn without replacement, seeded by the job seed
/// and the round index.
pub fn select_clients(config: &JobConfig, round: u64) -> BTreeSet<DeviceId> {
    let mut rng = batch_rng(config.seed, round);
    let mut pool = config.devices.clone();
    pool.sort_unstable();
    index::sample(&mut rng, pool.len(), config.clients_per_round())
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Open,
    Aggregated,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: u64,
    pub selected: BTreeSet<DeviceId>,
    pub updates: BTreeMap<DeviceId, UploadBundle>,
    pub status: RoundStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: u64,
    pub scope: Scope,
    /// `None` when the job has no test set.
    pub accuracy: Option<f64>,
    pub n_updates: usize,
    pub status: RoundStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "reason", rename_all = "snake_case")]
pub enum SubmitOutcome {
    Accepted { replaced: bool },
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    NotSelected,
    RoundClosed,
    RoundNotOpen,
    BadPayload(String),
    PermissionDenied(String),
}

/// Who is asking for a global model.
#[derive(Debug, Clone, PartialEq)]
pub enum Requester {
    /// The job owner or a participating device acting for its members.
    Participant,
    App(AppId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub job_id: String,
    pub status: JobStatus,
    pub rounds_completed: u64,
    pub history: Vec<MetricRow>,
    /// Canonical binary layout, base64.
    pub final_models: BTreeMap<Scope, String>,
}

/// Recomputes the models a round produces from its logged updates and the
/// previous round's models: per scope, updates are averaged in ascending
/// device order; scopes without updates carry over.
pub fn aggregate_round(
    scopes: &[Scope],
    previous: &BTreeMap<Scope, ModelParams>,
    updates: &BTreeMap<DeviceId, UploadBundle>,
) -> Result<(BTreeMap<Scope, ModelParams>, BTreeMap<Scope, usize>)> {
    let mut models = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for scope in scopes {
        let entries: Vec<(&ModelParams, u64)> = updates
            .values()
            .flat_map(|b| b.entries.iter())
            .filter(|e| &e.scope == scope)
            .map(|e| (&e.model, e.sample_count))
            .collect();
        counts.insert(scope.clone(), entries.len());
        let model = if entries.is_empty() {
            previous
                .get(scope)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("no previous model for {scope}")))?
        } else {
            federated_aggregate(entries)?
        };
        models.insert(scope.clone(), model);
    }
    Ok((models, counts))
}

/// One federated job and all of its history.
#[derive(Debug)]
pub struct Job {
    config: JobConfig,
    owner: String,
    registry: PermissionRegistry,
    status: JobStatus,
    budget_rounds: u64,
    /// `models[r]` holds every scope's model with provenance `r`.
    models: Vec<BTreeMap<Scope, ModelParams>>,
    metrics: Vec<MetricRow>,
    open: Option<RoundState>,
    opened_at: Instant,
    store: Option<JobStore>,
}

impl Job {
    /// Validates the config, checks the scenario's permission preconditions
    /// and initialises every scope from the job seed.
    pub fn create(config: JobConfig, owner: &str, store: Option<JobStore>) -> Result<Self> {
        config.validate()?;
        let registry = config.registry()?;
        check_scenario_permissions(&config.scenario, &registry)?;
        let init = init_model(config.feature_dim, config.num_classes, config.seed)?;
        let models = vec![config
            .scenario
            .scopes()
            .into_iter()
            .map(|s| (s, init.clone()))
            .collect()];
        let mut job = Job {
            budget_rounds: config.max_budget_rounds,
            config,
            owner: owner.to_string(),
            registry,
            status: JobStatus::Running,
            models,
            metrics: Vec::new(),
            open: None,
            opened_at: Instant::now(),
            store,
        };
        job.open_round(1);
        job.persist_document()?;
        job.persist_state()?;
        Ok(job)
    }

    /// Rebuilds a job from its directory. A round that was open when the
    /// process stopped is reopened empty.
    pub fn restore(store: JobStore) -> Result<Self> {
        let doc = store.read_document()?;
        let state = store.read_state()?;
        let scopes = doc.config.scenario.scopes();
        let init = init_model(doc.config.feature_dim, doc.config.num_classes, doc.config.seed)?;
        let mut models = vec![scopes.iter().map(|s| (s.clone(), init.clone())).collect()];
        let mut metrics = Vec::new();
        for r in 1..=state.last_closed {
            let log = store.read_round(r)?;
            let round_models = log
                .models
                .iter()
                .map(|(s, b64)| Ok((s.clone(), model_from_b64(b64, false)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            models.push(round_models);
            metrics.extend(log.metrics);
        }
        let mut job = Job {
            config: doc.config,
            owner: doc.owner,
            registry: doc.registry,
            status: state.status,
            budget_rounds: state.budget_rounds,
            models,
            metrics,
            open: None,
            opened_at: Instant::now(),
            store: Some(store),
        };
        if job.status == JobStatus::Running {
            job.open_round(state.last_closed + 1);
        }
        Ok(job)
    }

    pub fn id(&self) -> &str {
        &self.config.job_id
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn status(&self) -> JobStatus {
        self.status
    }

    pub fn registry(&self) -> &PermissionRegistry {
        &self.registry
    }

    pub fn scopes(&self) -> Vec<Scope> {
        self.config.scenario.scopes()
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn budget_rounds(&self) -> u64 {
        self.budget_rounds
    }

    /// Highest round whose models exist.
    pub fn last_closed(&self) -> u64 {
        self.models.len() as u64 - 1
    }

    pub fn open_round_state(&self) -> Option<&RoundState> {
        self.open.as_ref()
    }

    pub fn current_round(&self) -> Option<u64> {
        self.open.as_ref().map(|r| r.round)
    }

    fn open_round(&mut self, round: u64) {
        let selected = select_clients(&self.config, round);
        info!(job = %self.config.job_id, round, selected = selected.len(), "round opened");
        self.open = Some(RoundState {
            round,
            selected,
            updates: BTreeMap::new(),
            status: RoundStatus::Open,
        });
        self.opened_at = Instant::now();
    }

    /// Devices selected for round `round`. Only rounds that have opened
    /// (closed ones included) have a selection.
    pub fn selection(&self, round: u64) -> Result<BTreeSet<DeviceId>> {
        let opened = self.current_round().unwrap_or(self.last_closed());
        if round == 0 || round > opened {
            return Err(Error::NotFound(format!("round {round} has not opened")));
        }
        Ok(select_clients(&self.config, round))
    }

    pub fn submit_update(&mut self, round: u64, bundle: UploadBundle) -> Result<SubmitOutcome> {
        use RejectReason::*;
        let reject = |r| Ok(SubmitOutcome::Rejected(r));
        let Some(open) = &self.open else {
            return reject(RoundClosed);
        };
        if round < open.round {
            return reject(RoundClosed);
        }
        if round > open.round {
            return reject(RoundNotOpen);
        }
        if bundle.round != round {
            return reject(BadPayload(format!("bundle is for round {}, not {round}", bundle.round)));
        }
        if !open.selected.contains(&bundle.device_id) {
            return reject(NotSelected);
        }
        if let Err(msg) = self.check_entries(&bundle) {
            return reject(BadPayload(msg));
        }
        if let Err(e) = check_scenario_permissions(&self.config.scenario, &self.registry) {
            return reject(PermissionDenied(e.to_string()));
        }
        let device = bundle.device_id;
        let open = self.open.as_mut().expect("checked above");
        let replaced = open.updates.insert(device, bundle).is_some();
        if replaced {
            warn!(job = %self.config.job_id, round, device, "duplicate submission replaced earlier update");
        }
        Ok(SubmitOutcome::Accepted { replaced })
    }

    fn check_entries(&self, bundle: &UploadBundle) -> std::result::Result<(), String> {
        if bundle.entries.is_empty() {
            return Err("bundle has no entries".into());
        }
        let scopes = self.scopes();
        let mut seen = BTreeSet::new();
        for e in &bundle.entries {
            if !scopes.contains(&e.scope) {
                return Err(format!("scope {} is not part of this job", e.scope));
            }
            if !seen.insert(&e.scope) {
                return Err(format!("scope {} appears twice", e.scope));
            }
            if e.model.feature_dim() != self.config.feature_dim || e.model.num_classes() != self.config.num_classes {
                return Err(format!(
                    "model for {} is {}x{}, job expects {}x{}",
                    e.scope,
                    e.model.feature_dim(),
                    e.model.num_classes(),
                    self.config.feature_dim,
                    self.config.num_classes
                ));
            }
            if e.sample_count == 0 {
                return Err(format!("entry for {} has zero samples", e.scope));
            }
        }
        Ok(())
    }

    /// True once every selected device has reported.
    pub fn all_reported(&self) -> bool {
        self.open
            .as_ref()
            .is_some_and(|o| o.selected.iter().all(|d| o.updates.contains_key(d)))
    }

    /// True when the open round has been open longer than the timeout.
    pub fn deadline_passed(&self, now: Instant) -> bool {
        self.open.is_some()
            && now.duration_since(self.opened_at) >= Duration::from_secs_f64(self.config.round_timeout_secs)
    }

    /// Aggregates round `round`. Devices that have not reported are left
    /// out; with no updates at all the previous models carry over and the
    /// round is marked timed out. Opens the next round unless the job ran
    /// out of rounds or budget.
    pub fn close_round(&mut self, round: u64) -> Result<RoundState> {
        let Some(open) = self.open.as_ref() else {
            return Err(Error::Protocol(format!("round {round} is not open")));
        };
        if open.round != round {
            return Err(Error::Protocol(format!(
                "round {round} is not the open round ({})",
                open.round
            )));
        }
        let scopes = self.scopes();
        let previous = self.models.last().expect("round 0 always exists");
        let (models, counts) = aggregate_round(&scopes, previous, &open.updates)?;
        let status = if open.updates.is_empty() {
            RoundStatus::TimedOut
        } else {
            RoundStatus::Aggregated
        };
        let mut rows = Vec::with_capacity(scopes.len());
        for scope in &scopes {
            let accuracy = match &self.config.test_set {
                Some(test) => Some(evaluate(&models[scope], test)?),
                None => None,
            };
            rows.push(MetricRow {
                round,
                scope: scope.clone(),
                accuracy,
                n_updates: counts[scope],
                status,
            });
        }

        let mut closed = self.open.take().expect("checked above");
        closed.status = status;
        if let Some(store) = &self.store {
            store.write_round(&RoundLog {
                round,
                status,
                selected: closed.selected.iter().copied().collect(),
                updates: closed.updates.values().map(UploadBundle::to_wire).collect(),
                models: models
                    .iter()
                    .map(|(s, m)| (s.clone(), model_to_b64(m, false)))
                    .collect(),
                metrics: rows.clone(),
            })?;
        }
        self.models.push(models);
        self.metrics.extend(rows);
        info!(job = %self.config.job_id, round, ?status, updates = closed.updates.len(), "round closed");

        if round >= self.config.rounds || round >= self.budget_rounds {
            self.status = JobStatus::Terminated;
        } else {
            self.open_round(round + 1);
        }
        self.persist_state()?;
        if let Some(store) = &self.store {
            store.write_metrics(&self.metrics)?;
        }
        Ok(closed)
    }

    /// Model of `scope` with provenance `round`. Apps outside the scope need
    /// a `ReadGlobalModel` grant from one of its members.
    pub fn global_model(&self, scope: &Scope, round: u64, requester: &Requester) -> Result<ModelParams> {
        let models = self
            .models
            .get(round as usize)
            .ok_or_else(|| Error::NotFound(format!("round {round} has not been aggregated")))?;
        let model = models
            .get(scope)
            .ok_or_else(|| Error::NotFound(format!("scope {scope} is not part of this job")))?;
        if let Requester::App(app) = requester {
            let members = self.registry.scope_members(scope);
            let reader = Scope::App(app.clone());
            let allowed = members.contains(app)
                || members.iter().any(|m| {
                    self.registry
                        .check(m, &reader, Capability::ReadGlobalModel)
                        .is_allowed()
                });
            if !allowed {
                return Err(Error::Permission(format!("{app} may not read the model of {scope}")));
            }
        }
        Ok(model.clone())
    }

    /// Latest model of every scope.
    pub fn latest_models(&self) -> &BTreeMap<Scope, ModelParams> {
        self.models.last().expect("round 0 always exists")
    }

    /// All models by provenance.
    pub fn model_history(&self) -> &[BTreeMap<Scope, ModelParams>] {
        &self.models
    }

    pub fn apply_grants(&mut self, grants: &[PermissionGrant], revokes: &[PermissionGrant]) -> Result<()> {
        let mut next = self.registry.clone();
        next.grant_all(grants)?;
        for r in revokes {
            next.revoke(&r.source, &r.target, r.capability);
        }
        self.registry = next;
        self.persist_document()
    }

    /// Changes the round budget. A cap at or below the rounds already
    /// closed stops the job.
    pub fn set_budget(&mut self, max_rounds: u64) -> Result<()> {
        self.budget_rounds = max_rounds;
        if self.status == JobStatus::Running && max_rounds <= self.last_closed() {
            self.open = None;
            self.status = JobStatus::Terminated;
        }
        self.persist_state()
    }

    /// Stops the job (idempotent) and reports its history and final models.
    pub fn terminate(&mut self) -> Result<FinalReport> {
        if self.status == JobStatus::Running {
            info!(job = %self.config.job_id, "terminated");
            self.open = None;
            self.status = JobStatus::Terminated;
            self.persist_state()?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> FinalReport {
        FinalReport {
            job_id: self.config.job_id.clone(),
            status: self.status,
            rounds_completed: self.last_closed(),
            history: self.metrics.clone(),
            final_models: self
                .latest_models()
                .iter()
                .map(|(s, m)| (s.clone(), model_to_b64(m, false)))
                .collect(),
        }
    }

    fn persist_document(&self) -> Result<()> {
        match &self.store {
            Some(store) => store.write_document(&JobDocument {
                config: self.config.clone(),
                owner: self.owner.clone(),
                registry: self.registry.clone(),
            }),
            None => Ok(()),
        }
    }

    fn persist_state(&self) -> Result<()> {
        match &self.store {
            Some(store) => store.write_state(&StateDocument {
                status: self.status,
                budget_rounds: self.budget_rounds,
                last_closed: self.last_closed(),
            }),
            None => Ok(()),
        }
    }
}

pub type SharedJob = Arc<Mutex<Job>>;

/// All jobs of one server. Each job is guarded separately, so distinct jobs
/// proceed in parallel while submissions to one job are serialized.
#[derive(Debug, Default)]
pub struct Coordinator {
    jobs: RwLock<BTreeMap<String, SharedJob>>,
    root: Option<std::path::PathBuf>,
}

impl Coordinator {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Coordinator persisting under `root`, with every job found there
    /// restored.
    pub fn open(root: impl Into<std::path::PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let mut jobs = BTreeMap::new();
        for store in JobStore::discover(&root)? {
            let job = Job::restore(store)?;
            info!(job = %job.id(), last_closed = job.last_closed(), "restored job");
            jobs.insert(job.id().to_string(), Arc::new(Mutex::new(job)));
        }
        Ok(Self {
            jobs: RwLock::new(jobs),
            root: Some(root),
        })
    }

    pub fn create_job(&self, mut config: JobConfig, owner: &str) -> Result<String> {
        let mut jobs = self.jobs.write();
        if config.job_id.is_empty() {
            config.job_id = (1..)
                .map(|i| format!("job-{i}"))
                .find(|id| !jobs.contains_key(id))
                .expect("unbounded id space");
        }
        if jobs.contains_key(&config.job_id) {
            return Err(Error::Config(format!("job {} already exists", config.job_id)));
        }
        AppId::new(config.job_id.clone()).map_err(|_| Error::Config("job id must be a plain token".into()))?;
        let store = match &self.root {
            Some(root) => Some(JobStore::create(root, &config.job_id)?),
            None => None,
        };
        let id = config.job_id.clone();
        let job = Job::create(config, owner, store.clone());
        let job = match job {
            Ok(job) => job,
            Err(e) => {
                if let Some(store) = store {
                    store.remove();
                }
                return Err(e);
            }
        };
        jobs.insert(id.clone(), Arc::new(Mutex::new(job)));
        Ok(id)
    }

    pub fn job(&self, id: &str) -> Result<SharedJob> {
        self.jobs
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("job {id}")))
    }

    pub fn job_ids(&self) -> Vec<String> {
        self.jobs.read().keys().cloned().collect()
    }

    /// Submits an update and closes the round once every selected device
    /// has reported.
    pub fn submit(&self, job_id: &str, round: u64, bundle: UploadBundle) -> Result<SubmitOutcome> {
        let job = self.job(job_id)?;
        let mut job = job.lock();
        let outcome = job.submit_update(round, bundle)?;
        if matches!(outcome, SubmitOutcome::Accepted { .. }) && job.all_reported() {
            job.close_round(round)?;
        }
        Ok(outcome)
    }

    /// Closes every open round whose deadline has passed. Returns the
    /// `(job, round)` pairs closed.
    pub fn close_expired(&self, now: Instant) -> Vec<(String, u64)> {
        let jobs: Vec<SharedJob> = self.jobs.read().values().cloned().collect();
        let mut closed = Vec::new();
        for job in jobs {
            let mut job = job.lock();
            if job.deadline_passed(now) {
                let round = job.current_round().expect("deadline implies an open round");
                match job.close_round(round) {
                    Ok(_) => closed.push((job.id().to_string(), round)),
                    Err(e) => warn!(job = %job.id(), round, error = %e, "timeout close failed"),
                }
            }
        }
        closed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::UploadEntry;
    use crate::model::TrainConfig;

    pub(crate) fn app(s: &str) -> AppId {
        AppId::new(s).unwrap()
    }

    pub(crate) fn config(k: u32, fraction: f64) -> JobConfig {
        JobConfig {
            job_id: "j".into(),
            scenario: Scenario::SingleApp {
                apps: vec![app("a"), app("b")],
            },
            rounds: 20,
            client_fraction: fraction,
            train: TrainConfig {
                epochs: 50,
                batch_size: 20,
                learning_rate: 0.003,
                seed: 1,
            },
            feature_dim: 2,
            num_classes: 2,
            round_timeout_secs: 30.0,
            max_budget_rounds: 20,
            seed: 42,
            devices: (0..k).collect(),
            grants: Vec::new(),
            observers: vec![app("outsider")],
            test_set: None,
            schema: None,
            parameter_self_tuning: false,
        }
    }

    fn vec_model(w: [f64; 4]) -> ModelParams {
        ModelParams::from_parts(2, 2, w.to_vec(), vec![0.0, 0.0]).unwrap()
    }

    fn bundle(device: DeviceId, round: u64, scope: &str, model: ModelParams, n: u64) -> UploadBundle {
        UploadBundle {
            device_id: device,
            round,
            compressed: false,
            entries: vec![UploadEntry {
                scope: scope.parse().unwrap(),
                model,
                sample_count: n,
            }],
        }
    }

    #[test]
    fn config_bounds() {
        let mut c = config(10, 0.0);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.client_fraction = 1.5;
        assert!(c.validate().is_err());
        c.client_fraction = 1.0;
        c.validate().unwrap();
        c.max_budget_rounds = 10;
        assert!(c.validate().is_err());
        c.max_budget_rounds = 20;
        c.parameter_self_tuning = true;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("unsupported"));
    }

    #[test]
    fn schema_rules() {
        let col = |n: &str| Column {
            name: n.into(),
            kind: ColumnType::Real,
        };
        let mut c = config(2, 1.0);
        c.schema = Some(DataSchema {
            name: "s".into(),
            inputs: vec![col("x"), col("y")],
            outputs: vec![col("label")],
        });
        c.validate().unwrap();
        c.schema.as_mut().unwrap().outputs = vec![col("x")];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.schema.as_mut().unwrap().outputs.clear();
        assert!(c.validate().is_err());
        let parsed: Column = serde_json::from_str(r#"{"name":"n","type":"category"}"#).unwrap();
        assert_eq!(parsed.kind, ColumnType::Category);
    }

    #[test]
    fn selection_sizes_and_determinism() {
        let all = select_clients(&config(100, 1.0), 3);
        assert_eq!(all.len(), 100);
        let c = config(100, 0.1);
        let s = select_clients(&c, 3);
        assert_eq!(s.len(), 10);
        assert_eq!(s, select_clients(&c, 3));
        assert_ne!(s, select_clients(&c, 4));
        assert_eq!(config(10, 0.7).clients_per_round(), 7);
        assert_eq!(config(3, 0.01).clients_per_round(), 1);
    }

    #[test]
    fn joint_data_share_needs_grants() {
        let mut c = config(4, 1.0);
        let g = GroupId::new("g").unwrap();
        c.scenario = Scenario::JointExisting {
            group: g.clone(),
            members: vec![app("a"), app("b")],
            mode: SharingMode::DataShare,
        };
        assert!(matches!(Job::create(c.clone(), "o", None), Err(Error::Permission(_))));
        c.grants = ["a", "b"]
            .iter()
            .map(|m| PermissionGrant {
                source: app(m),
                target: Scope::Group(g.clone()),
                capability: Capability::ShareData,
                granted_at: 1,
            })
            .collect();
        Job::create(c, "o", None).unwrap();
    }

    #[test]
    fn submission_rules() {
        let mut job = Job::create(config(10, 0.5), "o", None).unwrap();
        let selected: Vec<_> = job.selection(1).unwrap().into_iter().collect();
        let outsider = (0..10).find(|d| !selected.contains(d)).unwrap();
        let m = vec_model([0.0; 4]);
        assert_eq!(
            job.submit_update(1, bundle(selected[0], 1, "app:a", m.clone(), 5))
                .unwrap(),
            SubmitOutcome::Accepted { replaced: false }
        );
        assert_eq!(
            job.submit_update(1, bundle(selected[0], 1, "app:a", m.clone(), 5))
                .unwrap(),
            SubmitOutcome::Accepted { replaced: true }
        );
        assert_eq!(
            job.submit_update(1, bundle(outsider, 1, "app:a", m.clone(), 5))
                .unwrap(),
            SubmitOutcome::Rejected(RejectReason::NotSelected)
        );
        let wrong_shape = ModelParams::zeros(3, 2).unwrap();
        assert!(matches!(
            job.submit_update(1, bundle(selected[1], 1, "app:a", wrong_shape, 5))
                .unwrap(),
            SubmitOutcome::Rejected(RejectReason::BadPayload(_))
        ));
        assert!(matches!(
            job.submit_update(1, bundle(selected[1], 1, "app:zzz", m.clone(), 5))
                .unwrap(),
            SubmitOutcome::Rejected(RejectReason::BadPayload(_))
        ));
        job.close_round(1).unwrap();
        assert_eq!(
            job.submit_update(1, bundle(selected[0], 1, "app:a", m, 5)).unwrap(),
            SubmitOutcome::Rejected(RejectReason::RoundClosed)
        );
        assert!(matches!(job.close_round(1), Err(Error::Protocol(_))));
        assert!(job.selection(3).is_err());
    }

    #[test]
    fn close_round_weighted_average_and_carry_over() {
        let mut job = Job::create(config(2, 1.0), "o", None).unwrap();
        job.submit_update(1, bundle(0, 1, "app:a", vec_model([1.0, 0.0, 0.0, 0.0]), 1))
            .unwrap();
        job.submit_update(1, bundle(1, 1, "app:a", vec_model([0.0, 1.0, 0.0, 0.0]), 3))
            .unwrap();
        let closed = job.close_round(1).unwrap();
        assert_eq!(closed.status, RoundStatus::Aggregated);
        let a = job
            .global_model(&Scope::app("a").unwrap(), 1, &Requester::Participant)
            .unwrap();
        assert_eq!(&a.weights()[..2], &[0.25, 0.75]);
        // No update for app:b, so it carries the initial model.
        let b0 = job
            .global_model(&Scope::app("b").unwrap(), 0, &Requester::Participant)
            .unwrap();
        let b1 = job
            .global_model(&Scope::app("b").unwrap(), 1, &Requester::Participant)
            .unwrap();
        assert_eq!(b0, b1);
        assert_eq!(job.metrics().len(), 2);
    }

    #[test]
    fn identical_updates_leave_model_unchanged() {
        let mut job = Job::create(config(100, 1.0), "o", None).unwrap();
        let w0 = job
            .global_model(&Scope::app("a").unwrap(), 0, &Requester::Participant)
            .unwrap();
        for d in 0..100 {
            job.submit_update(1, bundle(d, 1, "app:a", w0.clone(), 1 + d as u64))
                .unwrap();
        }
        assert!(job.all_reported());
        job.close_round(1).unwrap();
        assert_eq!(
            job.global_model(&Scope::app("a").unwrap(), 1, &Requester::Participant)
                .unwrap(),
            w0
        );
    }

    #[test]
    fn empty_round_times_out_and_carries_model() {
        let mut job = Job::create(config(3, 1.0), "o", None).unwrap();
        let closed = job.close_round(1).unwrap();
        assert_eq!(closed.status, RoundStatus::TimedOut);
        assert_eq!(job.model_history()[1], job.model_history()[0]);
        assert!(job.metrics().iter().all(|m| m.status == RoundStatus::TimedOut));
    }

    #[test]
    fn model_reads_respect_scope_and_grants() {
        let mut job = Job::create(config(2, 1.0), "o", None).unwrap();
        let a = Scope::app("a").unwrap();
        assert_eq!(
            job.global_model(&a, 0, &Requester::Participant).unwrap(),
            init_model(2, 2, 42).unwrap()
        );
        job.global_model(&a, 0, &Requester::App(app("a"))).unwrap();
        assert!(matches!(
            job.global_model(&a, 0, &Requester::App(app("outsider"))),
            Err(Error::Permission(_))
        ));
        job.apply_grants(
            &[PermissionGrant {
                source: app("a"),
                target: Scope::app("outsider").unwrap(),
                capability: Capability::ReadGlobalModel,
                granted_at: 0,
            }],
            &[],
        )
        .unwrap();
        job.global_model(&a, 0, &Requester::App(app("outsider"))).unwrap();
        assert!(matches!(
            job.global_model(&a, 5, &Requester::Participant),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn termination_and_budget() {
        let mut job = Job::create(config(2, 1.0), "o", None).unwrap();
        for r in 1..=5 {
            job.close_round(r).unwrap();
        }
        let report = job.terminate().unwrap();
        assert_eq!(report.rounds_completed, 5);
        assert!(report.history.iter().all(|m| m.round <= 5));
        assert_eq!(job.terminate().unwrap(), report);
        assert!(job.current_round().is_none());

        let mut job = Job::create(config(2, 1.0), "o", None).unwrap();
        job.set_budget(10).unwrap();
        let mut r = 1;
        while let Some(open) = job.current_round() {
            job.close_round(open).unwrap();
            r = open;
        }
        assert_eq!(r, 10);
        assert_eq!(job.status(), JobStatus::Terminated);
    }

    #[test]
    fn timeout_detection() {
        let mut c = config(2, 1.0);
        c.round_timeout_secs = 0.01;
        let coord = Coordinator::in_memory();
        let id = coord.create_job(c, "o").unwrap();
        let opened = Instant::now();
        let closed = coord.close_expired(opened + Duration::from_millis(50));
        assert_eq!(closed, vec![(id.clone(), 1)]);
        let job = coord.job(&id).unwrap();
        assert_eq!(job.lock().last_closed(), 1);
        assert_eq!(job.lock().current_round(), Some(2));
    }
}
