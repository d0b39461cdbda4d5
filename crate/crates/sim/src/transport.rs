//! How the harness talks to the server: directly to an in-process
//! coordinator, or over HTTP.

use std::collections::BTreeMap;
use std::sync::Arc;

use flaas_core::bundle::{DeviceId, UploadBundle};
use flaas_core::codec::model_from_b64;
use flaas_core::global::{Coordinator, FinalReport, JobConfig, JobStatus, MetricRow, RejectReason, SubmitOutcome};
use flaas_core::{ModelParams, Scope};
use flaas_server::api::{Created, ErrorBody, JobSummary, ModelEnvelope, Selection};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

use crate::error::SimError;

/// What the harness needs to know about a job between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct JobView {
    pub status: JobStatus,
    pub current_round: Option<u64>,
    pub last_closed: u64,
    pub scopes: Vec<Scope>,
    pub config: JobConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submitted {
    Accepted,
    /// Rejection code as reported by the server.
    Rejected(String),
}

pub trait Transport: Sync {
    fn create_job(&self, config: &JobConfig) -> Result<String, SimError>;
    fn job(&self, job: &str) -> Result<JobView, SimError>;
    fn selection(&self, job: &str, round: u64) -> Result<Vec<DeviceId>, SimError>;
    fn download(&self, job: &str, scope: &Scope, round: u64) -> Result<ModelParams, SimError>;
    fn submit(&self, job: &str, round: u64, bundle: &UploadBundle) -> Result<Submitted, SimError>;
    fn close_round(&self, job: &str, round: u64) -> Result<(), SimError>;
    fn metrics(&self, job: &str) -> Result<Vec<MetricRow>, SimError>;
    fn terminate(&self, job: &str) -> Result<FinalReport, SimError>;
}

/// Direct calls into a coordinator in this process.
#[derive(Debug, Clone)]
pub struct InProcess {
    coordinator: Arc<Coordinator>,
    owner: String,
}

impl InProcess {
    pub fn new(coordinator: Arc<Coordinator>) -> Self {
        Self {
            coordinator,
            owner: "local".into(),
        }
    }
}

impl Transport for InProcess {
    fn create_job(&self, config: &JobConfig) -> Result<String, SimError> {
        Ok(self.coordinator.create_job(config.clone(), &self.owner)?)
    }

    fn job(&self, job: &str) -> Result<JobView, SimError> {
        let job = self.coordinator.job(job)?;
        let job = job.lock();
        Ok(JobView {
            status: job.status(),
            current_round: job.current_round(),
            last_closed: job.last_closed(),
            scopes: job.scopes(),
            config: job.config().clone(),
        })
    }

    fn selection(&self, job: &str, round: u64) -> Result<Vec<DeviceId>, SimError> {
        Ok(self
            .coordinator
            .job(job)?
            .lock()
            .selection(round)?
            .into_iter()
            .collect())
    }

    fn download(&self, job: &str, scope: &Scope, round: u64) -> Result<ModelParams, SimError> {
        let job = self.coordinator.job(job)?;
        let model = job
            .lock()
            .global_model(scope, round, &flaas_core::global::Requester::Participant)?;
        Ok(model)
    }

    fn submit(&self, job: &str, round: u64, bundle: &UploadBundle) -> Result<Submitted, SimError> {
        // Round-trip through the wire form so both transports see the same bytes.
        let wire = UploadBundle::from_wire(&bundle.to_wire())?;
        Ok(match self.coordinator.submit(job, round, wire)? {
            SubmitOutcome::Accepted { .. } => Submitted::Accepted,
            SubmitOutcome::Rejected(reason) => Submitted::Rejected(reject_code(&reason).into()),
        })
    }

    fn close_round(&self, job: &str, round: u64) -> Result<(), SimError> {
        self.coordinator.job(job)?.lock().close_round(round)?;
        Ok(())
    }

    fn metrics(&self, job: &str) -> Result<Vec<MetricRow>, SimError> {
        Ok(self.coordinator.job(job)?.lock().metrics().to_vec())
    }

    fn terminate(&self, job: &str) -> Result<FinalReport, SimError> {
        Ok(self.coordinator.job(job)?.lock().terminate()?)
    }
}

fn reject_code(reason: &RejectReason) -> &'static str {
    match reason {
        RejectReason::NotSelected => "not_selected",
        RejectReason::RoundClosed => "round_closed",
        RejectReason::RoundNotOpen => "round_not_open",
        RejectReason::BadPayload(_) => "bad_payload",
        RejectReason::PermissionDenied(_) => "permission_denied",
    }
}

/// The `/api/v1` endpoints of a running server.
#[derive(Debug, Clone)]
pub struct Http {
    client: Client,
    base: String,
    customer_token: String,
    device_token: String,
}

impl Http {
    /// `device_token` is a pattern in which `{id}` stands for the device id.
    pub fn new(url: &str, customer_token: &str, device_token: &str) -> Result<Self, SimError> {
        let client = Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| SimError::Network(e.to_string()))?;
        Ok(Self {
            client,
            base: format!("{}/api/v1", url.trim_end_matches('/')),
            customer_token: customer_token.into(),
            device_token: device_token.into(),
        })
    }

    fn device_token(&self, device: DeviceId) -> String {
        self.device_token.replace("{id}", &device.to_string())
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, SimError> {
        let resp = req.send().map_err(|e| SimError::Network(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body: Option<ErrorBody> = resp.json().ok();
        let detail = body.map(|b| format!("{}: {}", b.error, b.message)).unwrap_or_default();
        Err(match status {
            StatusCode::BAD_REQUEST => SimError::Config(format!("{status} {detail}")),
            _ => SimError::Protocol(format!("{status} {detail}")),
        })
    }

    fn get<T: DeserializeOwned>(&self, path: &str, token: &str) -> Result<T, SimError> {
        let resp = self.send(self.client.get(format!("{}{path}", self.base)).bearer_auth(token))?;
        resp.json().map_err(|e| SimError::Protocol(e.to_string()))
    }
}

impl Transport for Http {
    fn create_job(&self, config: &JobConfig) -> Result<String, SimError> {
        let req = self
            .client
            .post(format!("{}/jobs", self.base))
            .bearer_auth(&self.customer_token)
            .json(config);
        let created: Created = self.send(req)?.json().map_err(|e| SimError::Protocol(e.to_string()))?;
        Ok(created.job_id)
    }

    fn job(&self, job: &str) -> Result<JobView, SimError> {
        let s: JobSummary = self.get(&format!("/jobs/{job}"), &self.customer_token)?;
        Ok(JobView {
            status: s.status,
            current_round: s.current_round,
            last_closed: s.last_closed,
            scopes: s.scopes,
            config: s.config,
        })
    }

    fn selection(&self, job: &str, round: u64) -> Result<Vec<DeviceId>, SimError> {
        let s: Selection = self.get(&format!("/jobs/{job}/rounds/{round}/selection"), &self.customer_token)?;
        Ok(s.devices)
    }

    fn download(&self, job: &str, scope: &Scope, round: u64) -> Result<ModelParams, SimError> {
        let env: ModelEnvelope = self.get(
            &format!("/jobs/{job}/model?scope={scope}&round={round}"),
            &self.customer_token,
        )?;
        Ok(model_from_b64(&env.payload_b64, env.compressed)?)
    }

    fn submit(&self, job: &str, round: u64, bundle: &UploadBundle) -> Result<Submitted, SimError> {
        let resp = self
            .client
            .post(format!("{}/jobs/{job}/rounds/{round}/updates", self.base))
            .bearer_auth(self.device_token(bundle.device_id))
            .json(&bundle.to_wire())
            .send()
            .map_err(|e| SimError::Network(e.to_string()))?;
        match resp.status() {
            s if s.is_success() => Ok(Submitted::Accepted),
            StatusCode::CONFLICT => {
                let body: ErrorBody = resp.json().map_err(|e| SimError::Protocol(e.to_string()))?;
                Ok(Submitted::Rejected(body.error))
            }
            s => {
                let body: Option<ErrorBody> = resp.json().ok();
                Err(SimError::Protocol(format!(
                    "{s} {}",
                    body.map(|b| b.message).unwrap_or_default()
                )))
            }
        }
    }

    fn close_round(&self, job: &str, round: u64) -> Result<(), SimError> {
        let req = self
            .client
            .post(format!("{}/jobs/{job}/rounds/{round}/close", self.base))
            .bearer_auth(&self.customer_token);
        self.send(req).map(|_| ())
    }

    fn metrics(&self, job: &str) -> Result<Vec<MetricRow>, SimError> {
        self.get(&format!("/jobs/{job}/metrics"), &self.customer_token)
    }

    fn terminate(&self, job: &str) -> Result<FinalReport, SimError> {
        let req = self
            .client
            .delete(format!("{}/jobs/{job}", self.base))
            .bearer_auth(&self.customer_token);
        self.send(req)?.json().map_err(|e| SimError::Protocol(e.to_string()))
    }
}

/// Downloads every scope's model for every closed round.
pub fn model_history(transport: &dyn Transport, job: &str) -> Result<Vec<BTreeMap<Scope, ModelParams>>, SimError> {
    let view = transport.job(job)?;
    (0..=view.last_closed)
        .map(|r| {
            view.scopes
                .iter()
                .map(|s| Ok((s.clone(), transport.download(job, s, r)?)))
                .collect()
        })
        .collect()
}
