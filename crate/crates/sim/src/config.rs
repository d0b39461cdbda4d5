//! Experiment configuration, read from TOML or JSON.
//!
//! ```toml
//! name = "joint"
//! devices = 100
//! samples_per_app = 250
//! noise_scale = 1.3
//! rounds = 30
//! seeds = [1, 2, 3, 4, 5]
//! output_dir = "out/joint"
//!
//! [scenario]
//! kind = "joint_existing"
//! apps = 2
//! mode = "data_share"
//!
//! [train]
//! epochs = 50
//! batch_size = 20
//! learning_rate = 0.003
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use flaas_core::local::SharingMode;
use flaas_core::{AppId, GroupId, Scope, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentScenario {
    /// `apps` independent apps per device, one model each.
    SingleApp {
        #[serde(default = "one")]
        apps: usize,
    },
    /// `apps` apps per device forming one group with a joint model.
    JointExisting {
        #[serde(default = "two")]
        apps: usize,
        mode: SharingMode,
    },
    /// One primary app helped by `secondaries` apps. With `DataShare` the
    /// secondaries hold other feature views of the primary's samples; with
    /// `ModelShare` they hold their own samples and contribute models.
    JointNew {
        #[serde(default = "one")]
        secondaries: usize,
        mode: SharingMode,
    },
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl ExperimentScenario {
    /// Number of apps hosted on every device.
    pub fn apps_per_device(&self) -> usize {
        match self {
            ExperimentScenario::SingleApp { apps } | ExperimentScenario::JointExisting { apps, .. } => *apps,
            ExperimentScenario::JointNew { secondaries, .. } => 1 + secondaries,
        }
    }

    /// Apps owning their own samples (and therefore a data partition).
    pub fn apps_with_samples(&self) -> usize {
        match self {
            ExperimentScenario::JointNew {
                mode: SharingMode::DataShare,
                ..
            } => 1,
            other => other.apps_per_device(),
        }
    }

    pub fn app_ids(&self) -> Vec<AppId> {
        (0..self.apps_per_device())
            .map(|i| AppId::new(format!("app{i}")).expect("valid id"))
            .collect()
    }

    pub fn group_id() -> GroupId {
        GroupId::new("group0").expect("valid id")
    }

    /// The scope compared across scenarios: the group's for joint
    /// scenarios, otherwise the first app's.
    pub fn headline_scope(&self) -> Scope {
        match self {
            ExperimentScenario::JointExisting { .. } => Scope::Group(Self::group_id()),
            _ => Scope::App(self.app_ids()[0].clone()),
        }
    }
}

/// How the experiment reaches the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum TransportConfig {
    #[default]
    InProcess,
    Http {
        url: String,
        customer_token: String,
        /// Token of device `d`, with `{id}` replaced by `d`.
        #[serde(default = "default_device_token")]
        device_token: String,
    },
}

fn default_device_token() -> String {
    "device-{id}".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: ExperimentScenario,
    /// Number of simulated devices `K`.
    pub devices: u32,
    /// Samples per app per device `S`.
    pub samples_per_app: usize,
    /// Label skew of the partition, 0 for IID.
    #[serde(default)]
    pub skew: f64,
    pub noise_scale: f64,
    #[serde(default)]
    pub dropout_prob: f64,
    pub rounds: u64,
    #[serde(default = "default_fraction")]
    pub client_fraction: f64,
    pub train: TrainConfig,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_raw_dim")]
    pub raw_dim: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Held-out samples per class for per-round evaluation.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Devices trained in parallel.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub compress: bool,
    /// Wall-clock timing columns are written as 0 unless set, keeping
    /// metrics.csv byte-reproducible.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: f64,
    #[serde(default)]
    pub transport: TransportConfig,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_fraction() -> f64 {
    1.0
}
fn default_classes() -> usize {
    10
}
fn default_raw_dim() -> usize {
    32
}
fn default_feature_dim() -> usize {
    16
}
fn default_test_per_class() -> usize {
    100
}
fn default_workers() -> usize {
    1
}
fn default_timeout() -> f64 {
    3600.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, SimError> {
        let config: Self = if json {
            serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.devices == 0 || self.samples_per_app == 0 || self.rounds == 0 {
            return bad("devices, samples_per_app and rounds must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return bad("skew must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1]");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        if self.num_classes < 2 || self.raw_dim == 0 || self.feature_dim == 0 || self.test_per_class == 0 {
            return bad("num_classes >= 2 and positive dimensions are required");
        }
        match self.scenario {
            ExperimentScenario::SingleApp { apps: 0 } => return bad("single_app needs apps >= 1"),
            ExperimentScenario::JointExisting { apps, .. } if apps < 2 => return bad("joint_existing needs apps >= 2"),
            ExperimentScenario::JointNew {
                mode: SharingMode::GradientShare,
                ..
            } => return bad("joint_new supports data_share and model_share"),
            _ => {}
        }
        self.train.validate().map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }

    /// Width of the model the job trains.
    pub fn model_dim(&self) -> usize {
        match self.scenario {
            ExperimentScenario::JointNew {
                secondaries,
                mode: SharingMode::DataShare,
            } => self.feature_dim * (1 + secondaries),
            _ => self.feature_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
devices = 4
samples_per_app = 20
noise_scale = 1.0
rounds = 3
seeds = [7]

[scenario]
kind = "joint_existing"
mode = "gradient_share"

[train]
epochs = 1
batch_size = 5
learning_rate = 0.1
seed = 0
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::parse(TOML, false).unwrap();
        assert_eq!(
            c.scenario,
            ExperimentScenario::JointExisting {
                apps: 2,
                mode: SharingMode::GradientShare
            }
        );
        assert_eq!((c.num_classes, c.raw_dim, c.feature_dim), (10, 32, 16));
        assert_eq!(c.transport, TransportConfig::InProcess);
        assert_eq!(c.scenario.headline_scope().to_string(), "group:group0");
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::parse(&json, true).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        for (from, to) in [
            ("devices = 4", "devices = 0"),
            ("seeds = [7]", "seeds = []"),
            ("noise_scale = 1.0", "noise_scale = -1.0"),
            ("noise_scale = 1.0", "noise_scale = 1.0\ndropout_prob = 1.5"),
            ("noise_scale = 1.0", "noise_scale = 1.0\nbogus = 1"),
            ("mode = \"gradient_share\"", "mode = \"gradient_share\"\napps = 1"),
        ] {
            let text = TOML.replace(from, to);
            assert!(
                matches!(ExperimentConfig::parse(&text, false), Err(SimError::Config(_))),
                "{to}"
            );
        }
        let new_grad = TOML.replace("joint_existing", "joint_new");
        assert!(ExperimentConfig::parse(&new_grad, false).is_err());
    }

    #[test]
    fn joint_new_widths() {
        let text = TOML
            .replace("joint_existing", "joint_new")
            .replace("gradient_share", "data_share");
        let c = ExperimentConfig::parse(&text, false).unwrap();
        assert_eq!(c.model_dim(), 32);
        assert_eq!(c.scenario.apps_with_samples(), 1);
        assert_eq!(c.scenario.apps_per_device(), 2);
    }
}
