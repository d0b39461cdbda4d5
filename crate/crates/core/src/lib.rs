//! Federated learning as a service.
//!
//! * [`model`], [`aggregate`], [`features`], [`codec`]: the numerical core
//!   (softmax head, SGD, Federated Averaging, wire layout of parameters).
//! * [`data`]: synthetic datasets and their partitioning across devices.
//! * [`permissions`]: cross-app permission grants.
//! * [`local`]: the on-device module hosting apps and joint training.
//! * [`global`]: the central server: jobs, rounds, aggregation, persistence.

pub mod aggregate;
pub mod bundle;
pub mod codec;
pub mod data;
pub mod error;
pub mod features;
pub mod global;
pub mod local;
pub mod model;
pub mod permissions;
pub mod store;

pub use aggregate::{aggregate_gradients, federated_aggregate};
pub use error::{Error, Result};
pub use model::{
    evaluate, gradient, init_model, local_train, loss, predict, sgd_step, GradientVector, LabeledBatch, ModelParams,
    TrainConfig,
};
pub use permissions::{AppId, Capability, GroupId, PermissionGrant, PermissionRegistry, Scope};
