//! On-device module: hosts registered apps and their private shards, builds
//! per-app and joint models under the three sharing modes, packages uploads
//! for the server and hands returned global models back to the apps.
//!
//! Raw samples never leave a [`DeviceState`]; an [`UploadBundle`] only holds
//! parameters and sample counts. Every movement of one app's data, gradient
//! or model to another app goes through the mirrored permission registry
//! first.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::aggregate::{aggregate_gradients, anchored_weighted_mean, federated_aggregate};
use crate::bundle::{DeviceId, UploadBundle, UploadEntry};
use crate::error::{Error, Result};
use crate::model::{
    self, batch_rng, epoch_batches, local_train, GradScratch, GradientVector, LabeledBatch, ModelParams, TrainConfig,
};
use crate::permissions::{AppId, Capability, GroupId, PermissionRegistry, Scope};

/// How the members of a group combine their contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    DataShare,
    GradientShare,
    ModelShare,
}

impl SharingMode {
    /// Capability each member must grant towards the group.
    pub fn capability(self) -> Capability {
        match self {
            SharingMode::DataShare => Capability::ShareData,
            SharingMode::GradientShare => Capability::ShareGradient,
            SharingMode::ModelShare => Capability::ShareModel,
        }
    }
}

/// Feature columns a secondary app offers for a new problem, one row per
/// sample key.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedFeatures {
    pub keys: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
}

impl KeyedFeatures {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContributionKind {
    Data(LabeledBatch),
    Features(KeyedFeatures),
    Gradient(GradientVector),
    Model(ModelParams, u64),
}

/// What one app hands to the device module.
#[derive(Debug, Clone, PartialEq)]
pub struct AppContribution {
    pub app: AppId,
    pub kind: ContributionKind,
}

/// Anything that maps a feature vector to class probabilities.
pub trait Predictor {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>>;
}

impl Predictor for ModelParams {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        model::predict(self, features)
    }
}

/// Soft-voting meta-model: `sum_m (n_m / n) * predict_m(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftVotingEnsemble {
    members: Vec<(ModelParams, u64)>,
}

impl SoftVotingEnsemble {
    pub fn new(members: Vec<(ModelParams, u64)>) -> Result<Self> {
        let Some((first, _)) = members.first() else {
            return Err(Error::Contract("an ensemble needs at least one member".into()));
        };
        if members.iter().any(|(m, n)| !m.same_shape(first) || *n == 0) {
            return Err(Error::Contract(
                "ensemble members must share a shape and have positive sample counts".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[(ModelParams, u64)] {
        &self.members
    }
}

impl Predictor for SoftVotingEnsemble {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        let probs = self
            .members
            .iter()
            .map(|(m, _)| model::predict(m, features))
            .collect::<Result<Vec<_>>>()?;
        let total: u64 = self.members.iter().map(|(_, n)| n).sum();
        let weights: Vec<f64> = self.members.iter().map(|(_, n)| *n as f64 / total as f64).collect();
        let views: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        Ok(anchored_weighted_mean(&views, &weights))
    }
}

/// Result of building a model for a new problem.
#[derive(Debug, Clone, PartialEq)]
pub enum JointModel {
    Linear(ModelParams),
    Ensemble(SoftVotingEnsemble),
}

impl Predictor for JointModel {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        match self {
            JointModel::Linear(m) => m.predict(features),
            JointModel::Ensemble(e) => e.predict(features),
        }
    }
}

#[derive(Debug, Clone)]
struct AppSlot {
    shard: LabeledBatch,
    keys: Vec<u64>,
    model: Option<ModelParams>,
}

/// State of one simulated device. Single owner: every mutation happens on
/// whichever executor currently holds it.
#[derive(Debug, Clone)]
pub struct DeviceState {
    device_id: DeviceId,
    round: u64,
    apps: BTreeMap<AppId, AppSlot>,
    permissions: PermissionRegistry,
    pools: BTreeMap<Scope, LabeledBatch>,
    scope_models: BTreeMap<Scope, ModelParams>,
    trained: BTreeMap<Scope, (ModelParams, u64)>,
    meta_models: BTreeMap<AppId, JointModel>,
    gradient_errors: BTreeMap<AppId, f64>,
}

impl DeviceState {
    pub fn new(device_id: DeviceId) -> Self {
        Self {
            device_id,
            round: 0,
            apps: BTreeMap::new(),
            permissions: PermissionRegistry::new(),
            pools: BTreeMap::new(),
            scope_models: BTreeMap::new(),
            trained: BTreeMap::new(),
            meta_models: BTreeMap::new(),
            gradient_errors: BTreeMap::new(),
        }
    }

    pub fn device_id(&self) -> DeviceId {
        self.device_id
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Registers an app with its private shard. Samples get keys `0..n`.
    pub fn register_app(&mut self, app: AppId, shard: LabeledBatch) -> Result<()> {
        let keys = (0..shard.len() as u64).collect();
        self.register_app_keyed(app, shard, keys)
    }

    /// Registers an app whose samples carry explicit join keys.
    pub fn register_app_keyed(&mut self, app: AppId, shard: LabeledBatch, keys: Vec<u64>) -> Result<()> {
        if self.apps.contains_key(&app) {
            return Err(Error::Registry(format!(
                "app {app} already registered on device {}",
                self.device_id
            )));
        }
        if keys.len() != shard.len() {
            return Err(Error::Contract("one key per sample required".into()));
        }
        self.permissions.register_app(app.clone());
        self.apps.insert(
            app,
            AppSlot {
                shard,
                keys,
                model: None,
            },
        );
        Ok(())
    }

    pub fn register_group(&mut self, group: GroupId, members: impl IntoIterator<Item = AppId>) -> Result<()> {
        self.permissions.register_group(group, members)
    }

    pub fn is_registered(&self, app: &AppId) -> bool {
        self.apps.contains_key(app)
    }

    pub fn shard(&self, app: &AppId) -> Option<&LabeledBatch> {
        self.apps.get(app).map(|s| &s.shard)
    }

    /// Replaces the local copy of the grants with the server's, keeping the
    /// apps and groups registered on this device.
    pub fn sync_permissions(&mut self, server: &PermissionRegistry) {
        let mut mirrored = server.clone();
        for app in self.apps.keys() {
            mirrored.register_app(app.clone());
        }
        for (group, members) in self.permissions.groups() {
            if mirrored.group_members(group).is_none() {
                // Members were validated when the group was registered here.
                let _ = mirrored.register_group(group.clone(), members.iter().cloned());
            }
        }
        self.permissions = mirrored;
    }

    pub fn permissions(&self) -> &PermissionRegistry {
        &self.permissions
    }

    /// Starts round `round`: joint-training pools and trained entries from
    /// the previous round are dropped.
    pub fn begin_round(&mut self, round: u64) {
        self.round = round;
        self.pools.clear();
        self.trained.clear();
        self.gradient_errors.clear();
    }

    fn slot(&self, app: &AppId) -> Result<&AppSlot> {
        self.apps
            .get(app)
            .ok_or_else(|| Error::Registry(format!("app {app} is not registered on device {}", self.device_id)))
    }

    /// Appends `samples` to the joint-training pool of `target` for this
    /// round, provided `source` granted `ShareData` to it.
    pub fn share_data(&mut self, source: &AppId, target: &Scope, samples: &LabeledBatch) -> Result<()> {
        self.slot(source)?;
        if !self.permissions.knows_scope(target) {
            return Err(Error::Registry(format!("unknown share target {target}")));
        }
        self.permissions.require(source, target, Capability::ShareData)?;
        let pool = self
            .pools
            .entry(target.clone())
            .or_insert_with(|| LabeledBatch::empty(samples.dim()));
        pool.extend(samples)?;
        debug!(device = self.device_id, %source, %target, n = samples.len(), "shared data");
        Ok(())
    }

    /// Shares the app's whole shard with `target`.
    pub fn share_shard(&mut self, source: &AppId, target: &Scope) -> Result<()> {
        let shard = self.slot(source)?.shard.clone();
        self.share_data(source, target, &shard)
    }

    pub fn pool(&self, scope: &Scope) -> Option<&LabeledBatch> {
        self.pools.get(scope)
    }

    /// Trains `app`'s own model on its shard, starting from `global`.
    pub fn train_single_app(
        &mut self,
        app: &AppId,
        global: &ModelParams,
        config: &TrainConfig,
    ) -> Result<(ModelParams, u64)> {
        let shard = &self.slot(app)?.shard;
        if shard.is_empty() {
            return Err(Error::Skip(format!("app {app} has no local data")));
        }
        let trained = local_train(global, shard, config)?;
        let n = shard.len() as u64;
        self.record(Scope::App(app.clone()), trained.clone(), n);
        Ok((trained, n))
    }

    fn record(&mut self, scope: Scope, model: ModelParams, n: u64) {
        self.trained.insert(scope, (model, n));
    }

    fn group_members(&self, group: &GroupId) -> Result<Vec<AppId>> {
        let members = self
            .permissions
            .group_members(group)
            .ok_or_else(|| Error::Registry(format!("unknown group {group}")))?;
        for m in members {
            self.slot(m)?;
        }
        Ok(members.iter().cloned().collect())
    }

    /// Builds the group's joint model for this round.
    ///
    /// * `DataShare`: SGD on the pool the members shared into.
    /// * `GradientShare`: lock-step iterations; at each step every member
    ///   computes a gradient on its own mini-batch at the current joint model
    ///   and the device applies their shard-size-weighted average.
    /// * `ModelShare`: each member trains on its own shard, then the member
    ///   models are federated-averaged.
    pub fn build_joint_model(
        &mut self,
        group: &GroupId,
        mode: SharingMode,
        global: &ModelParams,
        config: &TrainConfig,
    ) -> Result<(ModelParams, u64)> {
        let members = self.group_members(group)?;
        let scope = Scope::Group(group.clone());
        for m in &members {
            self.permissions.require(m, &scope, mode.capability())?;
        }
        let (model, n) = match mode {
            SharingMode::DataShare => {
                let pool = self
                    .pools
                    .get(&scope)
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| Error::Skip(format!("no data shared into {scope}")))?;
                (local_train(global, pool, config)?, pool.len() as u64)
            }
            SharingMode::GradientShare => {
                let shards: Vec<(&AppId, &LabeledBatch)> = members
                    .iter()
                    .map(|m| (m, &self.apps[m].shard))
                    .filter(|(_, s)| !s.is_empty())
                    .collect();
                if shards.is_empty() {
                    return Err(Error::Skip(format!("{scope} has no member data")));
                }
                let (model, errors) = gradient_share_train(global, &shards, config)?;
                self.gradient_errors.extend(errors);
                (model, shards.iter().map(|(_, s)| s.len() as u64).sum())
            }
            SharingMode::ModelShare => {
                let mut locals = Vec::new();
                for m in &members {
                    let shard = &self.apps[m].shard;
                    if !shard.is_empty() {
                        locals.push((local_train(global, shard, config)?, shard.len() as u64));
                    }
                }
                if locals.is_empty() {
                    return Err(Error::Skip(format!("{scope} has no member data")));
                }
                let joint = federated_aggregate(locals.iter().map(|(m, n)| (m, *n)))?;
                (joint, locals.iter().map(|(_, n)| n).sum())
            }
        };
        self.record(scope, model.clone(), n);
        Ok((model, n))
    }

    /// Per-member loss reported alongside the last gradient of the most
    /// recent `GradientShare` build. Informational only.
    pub fn gradient_errors(&self) -> &BTreeMap<AppId, f64> {
        &self.gradient_errors
    }

    /// Builds a model for a new problem owned by `primary`.
    ///
    /// * `DataShare`: secondaries contribute keyed feature columns which are
    ///   joined onto the primary's samples by key (unmatched rows dropped);
    ///   the joined set is trained from `global`.
    /// * `ModelShare`: the primary trains on its own shard and secondaries
    ///   contribute trained models; the result is a sample-weighted
    ///   soft-voting ensemble. The primary's own head is what gets uploaded.
    pub fn build_new_problem_model(
        &mut self,
        primary: &AppId,
        secondary: &[AppContribution],
        mode: SharingMode,
        global: &ModelParams,
        config: &TrainConfig,
    ) -> Result<(JointModel, u64)> {
        let target = Scope::App(primary.clone());
        let slot = self.slot(primary)?;
        match mode {
            SharingMode::DataShare => {
                let mut tables = Vec::with_capacity(secondary.len());
                for c in secondary {
                    self.permissions.require(&c.app, &target, Capability::ShareData)?;
                    let ContributionKind::Features(f) = &c.kind else {
                        return Err(Error::Contract(format!("{} must contribute feature columns", c.app)));
                    };
                    if f.keys.len() != f.rows.len() {
                        return Err(Error::Contract(format!(
                            "{} sent {} keys for {} rows",
                            c.app,
                            f.keys.len(),
                            f.rows.len()
                        )));
                    }
                    let index: HashMap<u64, &[f64]> =
                        f.keys.iter().copied().zip(f.rows.iter().map(Vec::as_slice)).collect();
                    tables.push(index);
                }
                let mut joined = LabeledBatch::empty(0);
                'rows: for (i, key) in slot.keys.iter().enumerate() {
                    let mut row = slot.shard.row(i).to_vec();
                    for table in &tables {
                        match table.get(key) {
                            Some(cols) => row.extend_from_slice(cols),
                            None => continue 'rows,
                        }
                    }
                    joined.push(&row, slot.shard.label(i))?;
                }
                if joined.is_empty() {
                    return Err(Error::Skip(format!(
                        "no samples of {primary} matched the secondary keys"
                    )));
                }
                let model = local_train(global, &joined, config)?;
                let n = joined.len() as u64;
                self.record(target, model.clone(), n);
                self.meta_models
                    .insert(primary.clone(), JointModel::Linear(model.clone()));
                Ok((JointModel::Linear(model), n))
            }
            SharingMode::ModelShare => {
                let mut others = Vec::with_capacity(secondary.len());
                for c in secondary {
                    self.permissions.require(&c.app, &target, Capability::ShareModel)?;
                    let ContributionKind::Model(m, n) = &c.kind else {
                        return Err(Error::Contract(format!("{} must contribute a trained model", c.app)));
                    };
                    others.push((m.clone(), *n));
                }
                if slot.shard.is_empty() {
                    return Err(Error::Skip(format!("app {primary} has no local data")));
                }
                let own = local_train(global, &slot.shard, config)?;
                let n_own = slot.shard.len() as u64;
                let mut members = vec![(own.clone(), n_own)];
                members.extend(others);
                let total = members.iter().map(|(_, n)| n).sum();
                let ensemble = SoftVotingEnsemble::new(members)?;
                self.record(target, own, n_own);
                self.meta_models
                    .insert(primary.clone(), JointModel::Ensemble(ensemble.clone()));
                Ok((JointModel::Ensemble(ensemble), total))
            }
            SharingMode::GradientShare => Err(Error::Config(
                "new-problem models are built by DataShare or ModelShare only".into(),
            )),
        }
    }

    /// Meta-model most recently built for `primary`, if any.
    pub fn meta_model(&self, primary: &AppId) -> Option<&JointModel> {
        self.meta_models.get(primary)
    }

    /// Entries trained this round, one per scope.
    pub fn trained_entries(&self) -> impl Iterator<Item = (&Scope, &(ModelParams, u64))> {
        self.trained.iter()
    }

    /// Packages this round's trained entries for upload.
    pub fn make_upload(&self, compressed: bool) -> Result<UploadBundle> {
        if self.trained.is_empty() {
            return Err(Error::Skip(format!(
                "device {} trained nothing in round {}",
                self.device_id, self.round
            )));
        }
        Ok(UploadBundle {
            device_id: self.device_id,
            round: self.round,
            compressed,
            entries: self
                .trained
                .iter()
                .map(|(scope, (model, n))| UploadEntry {
                    scope: scope.clone(),
                    model: model.clone(),
                    sample_count: *n,
                })
                .collect(),
        })
    }

    /// Installs global models. Either every scope is known and all are
    /// applied, or nothing changes.
    pub fn apply_download(&mut self, models: Vec<(Scope, ModelParams)>) -> Result<()> {
        for (scope, _) in &models {
            let known = match scope {
                Scope::App(a) => self.apps.contains_key(a),
                Scope::Group(g) => self.permissions.group_members(g).is_some(),
            };
            if !known {
                return Err(Error::Protocol(format!(
                    "device {} does not know scope {scope}",
                    self.device_id
                )));
            }
        }
        for (scope, model) in models {
            for app in self.permissions.scope_members(&scope) {
                if let Some(slot) = self.apps.get_mut(&app) {
                    slot.model = Some(model.clone());
                }
            }
            self.scope_models.insert(scope, model);
        }
        Ok(())
    }

    /// The model currently installed for `app`.
    pub fn app_model(&self, app: &AppId) -> Option<&ModelParams> {
        self.apps.get(app).and_then(|s| s.model.as_ref())
    }

    pub fn scope_model(&self, scope: &Scope) -> Option<&ModelParams> {
        self.scope_models.get(scope)
    }
}

/// Lock-step gradient sharing over member shards.
///
/// With a pooled size `n` and batch size `B`, member `i` cuts its reshuffled
/// shard into batches of `ceil(B * n_i / n)`, so each member covers its shard
/// once per epoch. An epoch runs as many steps as the longest member
/// schedule; members whose schedule ran out sit the remaining steps out.
/// Member `m` draws its order from stream `m` of the batch generator; a
/// single member therefore reproduces [`local_train`] exactly.
fn gradient_share_train(
    global: &ModelParams,
    shards: &[(&AppId, &LabeledBatch)],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<(AppId, f64)>)> {
    config.validate()?;
    for (_, s) in shards {
        global.check_batch(s)?;
    }
    let pooled: usize = shards.iter().map(|(_, s)| s.len()).sum();
    let member_batch: Vec<usize> = shards
        .iter()
        .map(|(_, s)| (config.batch_size * s.len()).div_ceil(pooled))
        .collect();
    let mut rngs: Vec<_> = (0..shards.len()).map(|m| batch_rng(config.seed, m as u64)).collect();
    let mut orders: Vec<Vec<usize>> = shards.iter().map(|(_, s)| (0..s.len()).collect()).collect();
    let mut scratch = GradScratch::new(global);
    let mut current = global.clone();
    let mut errors = vec![0.0; shards.len()];
    for _ in 0..config.epochs {
        let schedules: Vec<Vec<Vec<usize>>> = orders
            .iter_mut()
            .zip(rngs.iter_mut())
            .zip(&member_batch)
            .map(|((order, rng), &b)| epoch_batches(order, rng, b))
            .collect();
        let steps = schedules.iter().map(Vec::len).max().unwrap_or(0);
        for step in 0..steps {
            let mut grads = Vec::with_capacity(shards.len());
            for (m, ((_, shard), schedule)) in shards.iter().zip(&schedules).enumerate() {
                if let Some(batch) = schedule.get(step) {
                    let loss = scratch.compute(&current, shard, batch);
                    errors[m] = loss;
                    grads.push((scratch.to_gradient(batch.len() as u64, loss), shard.len() as u64));
                }
            }
            current = aggregate_gradients(&current, grads.iter().map(|(g, n)| (g, *n)), config.learning_rate)?;
        }
    }
    let errors = shards.iter().map(|(a, _)| (*a).clone()).zip(errors).collect();
    Ok((current, errors))
}
