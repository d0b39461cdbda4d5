//! Synthetic device population for one seed: data generation, partitioning
//! into per-app shards, feature extraction, and the job every device joins.

use std::collections::BTreeMap;

use flaas_core::bundle::{DeviceId, UploadBundle};
use flaas_core::data::{generate_synthetic, partition, ClientSizes, PartitionSpec};
use flaas_core::features::FeatureExtractor;
use flaas_core::global::{Column, ColumnType, DataSchema, JobConfig, Scenario};
use flaas_core::local::{AppContribution, ContributionKind, DeviceState, KeyedFeatures, SharingMode};
use flaas_core::{local_train, AppId, LabeledBatch, ModelParams, PermissionGrant, Result, Scope, TrainConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ExperimentScenario};

const TAG_DATA: u64 = 1;
const TAG_PARTITION: u64 = 2;
const TAG_JOB: u64 = 3;
const TAG_DROPOUT: u64 = 4;
const TAG_EXTRACTOR: u64 = 100;

/// Independent seed for one purpose, drawn from stream `tag` of `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

/// Whether `device` drops out of `round`, decided by `(seed, round, device)`
/// alone.
pub fn drops_out(seed: u64, round: u64, device: DeviceId, prob: f64) -> bool {
    if prob <= 0.0 {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_DROPOUT));
    rng.set_stream((round << 32) | u64::from(device));
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    u < prob
}

/// Per-device, per-round local training config.
pub fn device_train_config(base: &TrainConfig, round: u64, device: DeviceId) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(base.seed, (round << 32) | u64::from(device)),
        ..*base
    }
}

/// One simulated phone.
#[derive(Debug, Clone)]
pub struct SimDevice {
    pub state: DeviceState,
    scenario: ExperimentScenario,
    apps: Vec<AppId>,
    /// Feature views held by secondary apps of a new-problem job.
    views: Vec<(AppId, KeyedFeatures)>,
    compress: bool,
}

impl SimDevice {
    pub fn id(&self) -> DeviceId {
        self.state.device_id()
    }

    /// Installs the round's global models, trains every scope this device
    /// contributes to and packages the upload. `None` when nothing could be
    /// trained.
    pub fn train_round(
        &mut self,
        round: u64,
        globals: &BTreeMap<Scope, ModelParams>,
        train: &TrainConfig,
    ) -> Result<Option<UploadBundle>> {
        self.state.begin_round(round);
        self.state
            .apply_download(globals.iter().map(|(s, m)| (s.clone(), m.clone())).collect())?;
        let config = device_train_config(train, round, self.id());
        let global = |scope: &Scope| {
            globals
                .get(scope)
                .ok_or_else(|| flaas_core::Error::Protocol(format!("no global model for {scope}")))
        };
        let outcome = match &self.scenario {
            ExperimentScenario::SingleApp { .. } => {
                for app in self.apps.clone() {
                    let scope = Scope::App(app.clone());
                    skip_ok(self.state.train_single_app(&app, global(&scope)?, &config))?;
                }
                Ok(())
            }
            ExperimentScenario::JointExisting { mode, .. } => {
                let group = ExperimentScenario::group_id();
                let scope = Scope::Group(group.clone());
                if *mode == SharingMode::DataShare {
                    for app in &self.apps {
                        self.state.share_shard(app, &scope)?;
                    }
                }
                skip_ok(self.state.build_joint_model(&group, *mode, global(&scope)?, &config))
            }
            ExperimentScenario::JointNew { mode, .. } => {
                let primary = self.apps[0].clone();
                let scope = Scope::App(primary.clone());
                let start = global(&scope)?;
                let contributions = match mode {
                    SharingMode::DataShare => self
                        .views
                        .iter()
                        .map(|(app, view)| AppContribution {
                            app: app.clone(),
                            kind: ContributionKind::Features(view.clone()),
                        })
                        .collect(),
                    _ => {
                        let mut out = Vec::new();
                        for (j, app) in self.apps[1..].iter().enumerate() {
                            let shard = self.state.shard(app).expect("registered");
                            if shard.is_empty() {
                                continue;
                            }
                            let own = TrainConfig {
                                seed: derive_seed(config.seed, j as u64 + 1),
                                ..config
                            };
                            out.push(AppContribution {
                                app: app.clone(),
                                kind: ContributionKind::Model(local_train(start, shard, &own)?, shard.len() as u64),
                            });
                        }
                        out
                    }
                };
                skip_ok(
                    self.state
                        .build_new_problem_model(&primary, &contributions, *mode, start, &config),
                )
            }
        };
        outcome?;
        match self.state.make_upload(self.compress) {
            Ok(bundle) => Ok(Some(bundle)),
            Err(e) if e.is_skip() => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn skip_ok<T>(r: Result<T>) -> Result<()> {
    match r {
        Ok(_) => Ok(()),
        Err(e) if e.is_skip() => Ok(()),
        Err(e) => Err(e),
    }
}

/// Everything one seeded run needs.
#[derive(Debug, Clone)]
pub struct Population {
    pub seed: u64,
    pub job: JobConfig,
    pub devices: Vec<SimDevice>,
}

impl Population {
    pub fn build(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let scenario = &config.scenario;
        let classes = config.num_classes;
        let apps = scenario.app_ids();
        let with_samples = scenario.apps_with_samples();
        let clients = config.devices as usize * with_samples;
        let test_count = classes * config.test_per_class;
        let per_class = (clients * config.samples_per_app).div_ceil(classes) + config.test_per_class;

        let data = generate_synthetic(
            classes,
            config.raw_dim,
            per_class,
            config.noise_scale,
            derive_seed(seed, TAG_DATA),
        )?;
        let (test, pool) = data.split_front(test_count)?;
        let parts = partition(
            &pool,
            &PartitionSpec {
                num_clients: clients,
                sizes: ClientSizes::Equal(config.samples_per_app),
                skew: config.skew,
                seed: derive_seed(seed, TAG_PARTITION),
            },
        )?;

        let joined_views = matches!(
            scenario,
            ExperimentScenario::JointNew {
                mode: SharingMode::DataShare,
                ..
            }
        );
        let view_count = if joined_views { apps.len() } else { 1 };
        let extractors = (0..view_count)
            .map(|v| {
                FeatureExtractor::new(
                    config.raw_dim,
                    config.feature_dim,
                    derive_seed(seed, TAG_EXTRACTOR + v as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (test_raw, test_labels) = test.subset(&(0..test.len()).collect::<Vec<_>>());
        let test_set = joined_batch(&extractors, &test_raw, &test_labels)?;

        let job = job_config(config, seed, test_set);
        let registry = job.registry()?;

        let mut devices = Vec::with_capacity(config.devices as usize);
        for d in 0..config.devices {
            let mut state = DeviceState::new(d);
            let mut views = Vec::new();
            for (i, app) in apps.iter().enumerate() {
                if i >= with_samples {
                    // Secondary feature view over the primary's samples.
                    let idx = &parts[d as usize * with_samples];
                    let (raw, _) = pool.subset(idx);
                    let rows = raw
                        .iter()
                        .map(|x| extractors[i].extract(x))
                        .collect::<Result<Vec<_>>>()?;
                    views.push((
                        app.clone(),
                        KeyedFeatures {
                            keys: idx.iter().map(|&k| k as u64).collect(),
                            rows,
                        },
                    ));
                    state.register_app(app.clone(), LabeledBatch::empty(config.feature_dim))?;
                    continue;
                }
                let idx = &parts[d as usize * with_samples + i];
                let (raw, labels) = pool.subset(idx);
                let shard = extractors[0].extract_batch(&raw, &labels)?;
                state.register_app_keyed(app.clone(), shard, idx.iter().map(|&k| k as u64).collect())?;
            }
            if let ExperimentScenario::JointExisting { .. } = scenario {
                state.register_group(ExperimentScenario::group_id(), apps.iter().cloned())?;
            }
            state.sync_permissions(&registry);
            devices.push(SimDevice {
                state,
                scenario: scenario.clone(),
                apps: apps.clone(),
                views,
                compress: config.compress,
            });
        }
        Ok(Self { seed, job, devices })
    }
}

/// Concatenates every extractor's view of each raw sample.
fn joined_batch(extractors: &[FeatureExtractor], raw: &[Vec<f64>], labels: &[usize]) -> Result<LabeledBatch> {
    let mut rows = Vec::with_capacity(raw.len());
    for x in raw {
        let mut row = Vec::new();
        for ex in extractors {
            row.extend(ex.extract(x)?);
        }
        rows.push(row);
    }
    LabeledBatch::new(rows, labels.to_vec())
}

/// The job a seeded run submits. Apps grant exactly what the scenario
/// requires.
pub fn job_config(config: &ExperimentConfig, seed: u64, test_set: LabeledBatch) -> JobConfig {
    let apps = config.scenario.app_ids();
    let scenario = match &config.scenario {
        ExperimentScenario::SingleApp { .. } => Scenario::SingleApp { apps },
        ExperimentScenario::JointExisting { mode, .. } => Scenario::JointExisting {
            group: ExperimentScenario::group_id(),
            members: apps,
            mode: *mode,
        },
        ExperimentScenario::JointNew { mode, .. } => Scenario::JointNew {
            primary: apps[0].clone(),
            secondaries: apps[1..].to_vec(),
            mode: *mode,
        },
    };
    let grants = scenario
        .required_grants()
        .into_iter()
        .map(|(source, target, capability)| PermissionGrant {
            source,
            target,
            capability,
            granted_at: 0,
        })
        .collect();
    let column = |name: String, kind| Column { name, kind };
    JobConfig {
        job_id: String::new(),
        scenario,
        rounds: config.rounds,
        client_fraction: config.client_fraction,
        train: TrainConfig {
            seed: derive_seed(config.train.seed ^ seed, TAG_JOB),
            ..config.train
        },
        feature_dim: config.model_dim(),
        num_classes: config.num_classes,
        round_timeout_secs: config.round_timeout_secs,
        max_budget_rounds: config.rounds,
        seed: derive_seed(seed, TAG_JOB),
        devices: (0..config.devices).collect(),
        grants,
        observers: Vec::new(),
        test_set: Some(test_set),
        schema: Some(DataSchema {
            name: config.name.clone(),
            inputs: (0..config.raw_dim)
                .map(|i| column(format!("x{i}"), ColumnType::Real))
                .collect(),
            outputs: vec![column("label".into(), ColumnType::Category)],
        }),
        parameter_self_tuning: false,
    }
}
