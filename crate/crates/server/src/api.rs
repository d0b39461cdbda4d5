//! Endpoint handlers.
//!
//! | method | path                                         | role              |
//! |--------|----------------------------------------------|-------------------|
//! | POST   | /api/v1/jobs                                 | customer          |
//! | GET    | /api/v1/jobs                                 | customer          |
//! | GET    | /api/v1/jobs/{id}                            | owner, job device |
//! | DELETE | /api/v1/jobs/{id}                            | owner             |
//! | POST   | /api/v1/jobs/{id}/permissions                | owner             |
//! | PUT    | /api/v1/jobs/{id}/budget                     | owner             |
//! | GET    | /api/v1/jobs/{id}/rounds/{r}/selection       | any               |
//! | POST   | /api/v1/jobs/{id}/rounds/{r}/updates         | device            |
//! | POST   | /api/v1/jobs/{id}/rounds/{r}/close           | owner             |
//! | GET    | /api/v1/jobs/{id}/model?scope=&round=&app=   | any, see below    |
//! | GET    | /api/v1/jobs/{id}/metrics                    | owner             |
//!
//! Models are readable by the owner and by the job's devices. Naming an
//! `app` makes the read on behalf of that app, which needs a
//! `ReadGlobalModel` grant when the app is outside the scope.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use flaas_core::bundle::{DeviceId, UploadBundle, WireBundle};
use flaas_core::codec::model_to_b64;
use flaas_core::global::{
    Coordinator, FinalReport, Job, JobConfig, JobStatus, MetricRow, RejectReason, Requester, RoundStatus, SubmitOutcome,
};
use flaas_core::{AppId, Error, PermissionGrant, Scope};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ApiToken, Role};

#[derive(Clone)]
pub struct AppState {
    pub coordinator: Arc<Coordinator>,
    tokens: Arc<HashMap<String, Principal>>,
}

impl AppState {
    pub fn new(coordinator: Arc<Coordinator>, tokens: &[ApiToken]) -> Self {
        let tokens = tokens
            .iter()
            .map(|t| {
                (
                    t.token.clone(),
                    Principal {
                        id: t.principal.clone(),
                        role: t.role,
                    },
                )
            })
            .collect();
        Self {
            coordinator,
            tokens: Arc::new(tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub id: String,
    pub role: Role,
}

impl Principal {
    fn device_id(&self) -> Option<DeviceId> {
        match self.role {
            Role::Device => self.id.parse().ok(),
            Role::Customer => None,
        }
    }

    fn require(&self, role: Role) -> Result<(), ApiError> {
        if self.role == role {
            Ok(())
        } else {
            Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "forbidden",
                format!("{:?} token required", role),
            ))
        }
    }
}

impl FromRequestParts<AppState> for Principal {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let unauthorized = || {
            ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or unknown bearer token",
            )
        };
        let value = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .ok_or_else(unauthorized)?;
        let token = value.strip_prefix("Bearer ").ok_or_else(unauthorized)?;
        state.tokens.get(token.trim()).cloned().ok_or_else(unauthorized)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Config(_) | Error::Contract(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Error::Protocol(_) | Error::Skip(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Registry(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_party"),
            Error::Permission(_) => (StatusCode::FORBIDDEN, "permission_denied"),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn require_owner(job: &Job, who: &Principal) -> ApiResult<()> {
    who.require(Role::Customer)?;
    if job.owner() != who.id {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            "job belongs to another customer",
        ));
    }
    Ok(())
}

fn is_job_device(job: &Job, who: &Principal) -> bool {
    who.device_id().is_some_and(|d| job.config().devices.contains(&d))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JobSummary {
    pub job_id: String,
    pub status: JobStatus,
    pub current_round: Option<u64>,
    pub last_closed: u64,
    pub budget_rounds: u64,
    pub scopes: Vec<Scope>,
    /// The job config without its test set.
    pub config: JobConfig,
}

fn summary(job: &Job) -> JobSummary {
    let mut config = job.config().clone();
    config.test_set = None;
    JobSummary {
        job_id: job.id().to_string(),
        status: job.status(),
        current_round: job.current_round(),
        last_closed: job.last_closed(),
        budget_rounds: job.budget_rounds(),
        scopes: job.scopes(),
        config,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub job_id: String,
}

pub async fn create_job(State(state): State<AppState>, who: Principal, body: Bytes) -> ApiResult<impl IntoResponse> {
    who.require(Role::Customer)?;
    let config: JobConfig = parse_json(&body)?;
    let job_id = state.coordinator.create_job(config, &who.id).map_err(|e| match e {
        Error::Permission(_) => ApiError::new(StatusCode::CONFLICT, "unsatisfiable_permissions", e.to_string()),
        Error::Registry(_) => ApiError::bad_request(e.to_string()),
        other => other.into(),
    })?;
    Ok((StatusCode::CREATED, Json(Created { job_id })))
}

pub async fn list_jobs(State(state): State<AppState>, who: Principal) -> ApiResult<Json<Vec<JobSummary>>> {
    who.require(Role::Customer)?;
    let mut out = Vec::new();
    for id in state.coordinator.job_ids() {
        let job = state.coordinator.job(&id)?;
        let job = job.lock();
        if job.owner() == who.id {
            out.push(summary(&job));
        }
    }
    Ok(Json(out))
}

pub async fn get_job(
    State(state): State<AppState>,
    who: Principal,
    Path(id): Path<String>,
) -> ApiResult<Json<JobSummary>> {
    let job = state.coordinator.job(&id)?;
    let job = job.lock();
    if !is_job_device(&job, &who) {
        require_owner(&job, &who)?;
    }
    Ok(Json(summary(&job)))
}

pub async fn delete_job(
    State(state): State<AppState>,
    who: Principal,
    Path(id): Path<String>,
) -> ApiResult<Json<FinalReport>> {
    let job = state.coordinator.job(&id)?;
    let mut job = job.lock();
    require_owner(&job, &who)?;
    Ok(Json(job.terminate()?))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum PermissionRequest {
    Grants(Vec<PermissionGrant>),
    Changes {
        #[serde(default)]
        grant: Vec<PermissionGrant>,
        #[serde(default)]
        revoke: Vec<PermissionGrant>,
    },
}

pub async fn update_permissions(
    State(state): State<AppState>,
    who: Principal,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let job = state.coordinator.job(&id)?;
    let mut job = job.lock();
    require_owner(&job, &who)?;
    let (grant, revoke) = match parse_json(&body)? {
        PermissionRequest::Grants(g) => (g, Vec::new()),
        PermissionRequest::Changes { grant, revoke } => (grant, revoke),
    };
    job.apply_grants(&grant, &revoke)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BudgetRequest {
    pub max_budget_rounds: u64,
}

pub async fn set_budget(
    State(state): State<AppState>,
    who: Principal,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<JobSummary>> {
    let job = state.coordinator.job(&id)?;
    let mut job = job.lock();
    require_owner(&job, &who)?;
    let req: BudgetRequest = parse_json(&body)?;
    job.set_budget(req.max_budget_rounds)?;
    Ok(Json(summary(&job)))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Selection {
    pub round: u64,
    pub devices: Vec<DeviceId>,
}

pub async fn selection(
    State(state): State<AppState>,
    _who: Principal,
    Path((id, round)): Path<(String, u64)>,
) -> ApiResult<Json<Selection>> {
    let job = state.coordinator.job(&id)?;
    let devices = job.lock().selection(round)?.into_iter().collect();
    Ok(Json(Selection { round, devices }))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Accepted {
    pub accepted: bool,
    pub replaced: bool,
}

pub async fn submit_update(
    State(state): State<AppState>,
    who: Principal,
    Path((id, round)): Path<(String, u64)>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Accepted>)> {
    who.require(Role::Device)?;
    state.coordinator.job(&id)?;
    let wire: WireBundle = parse_json(&body)?;
    if who.device_id() != Some(wire.device_id) {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            format!("token does not belong to device {}", wire.device_id),
        ));
    }
    let bundle = UploadBundle::from_wire(&wire)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_payload", e.to_string()))?;
    match state.coordinator.submit(&id, round, bundle)? {
        SubmitOutcome::Accepted { replaced } => Ok((
            StatusCode::ACCEPTED,
            Json(Accepted {
                accepted: true,
                replaced,
            }),
        )),
        SubmitOutcome::Rejected(reason) => Err(match reason {
            RejectReason::NotSelected => ApiError::new(
                StatusCode::CONFLICT,
                "not_selected",
                "device is not selected for this round",
            ),
            RejectReason::RoundClosed => {
                ApiError::new(StatusCode::CONFLICT, "round_closed", format!("round {round} is closed"))
            }
            RejectReason::RoundNotOpen => ApiError::new(
                StatusCode::CONFLICT,
                "round_not_open",
                format!("round {round} is not open yet"),
            ),
            RejectReason::BadPayload(msg) => ApiError::new(StatusCode::BAD_REQUEST, "bad_payload", msg),
            RejectReason::PermissionDenied(msg) => ApiError::new(StatusCode::FORBIDDEN, "permission_denied", msg),
        }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Closed {
    pub round: u64,
    pub status: RoundStatus,
    pub n_updates: usize,
}

pub async fn close_round(
    State(state): State<AppState>,
    who: Principal,
    Path((id, round)): Path<(String, u64)>,
) -> ApiResult<Json<Closed>> {
    let job = state.coordinator.job(&id)?;
    let mut job = job.lock();
    require_owner(&job, &who)?;
    let closed = job.close_round(round)?;
    Ok(Json(Closed {
        round,
        status: closed.status,
        n_updates: closed.updates.len(),
    }))
}

#[derive(Debug, Clone, Deserialize)]
pub struct ModelQuery {
    pub scope: String,
    /// Latest closed round when omitted.
    pub round: Option<u64>,
    pub app: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelEnvelope {
    pub job_id: String,
    pub scope: Scope,
    pub round: u64,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Canonical binary layout, base64.
    pub payload_b64: String,
    pub compressed: bool,
}

pub async fn get_model(
    State(state): State<AppState>,
    who: Principal,
    Path(id): Path<String>,
    Query(q): Query<ModelQuery>,
) -> ApiResult<Json<ModelEnvelope>> {
    let scope: Scope = q
        .scope
        .parse()
        .map_err(|e: Error| ApiError::bad_request(e.to_string()))?;
    let app = q
        .app
        .map(AppId::new)
        .transpose()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let job = state.coordinator.job(&id)?;
    let job = job.lock();
    let participant = is_job_device(&job, &who) || (who.role == Role::Customer && job.owner() == who.id);
    let requester = match app {
        Some(app) => Requester::App(app),
        None if participant => Requester::Participant,
        None => {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "permission_denied",
                "name the requesting app to read another job's model",
            ))
        }
    };
    let round = q.round.unwrap_or(job.last_closed());
    let model = job.global_model(&scope, round, &requester)?;
    Ok(Json(ModelEnvelope {
        job_id: id,
        scope,
        round,
        feature_dim: model.feature_dim(),
        num_classes: model.num_classes(),
        payload_b64: model_to_b64(&model, false),
        compressed: false,
    }))
}

pub async fn metrics(
    State(state): State<AppState>,
    who: Principal,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<MetricRow>>> {
    let job = state.coordinator.job(&id)?;
    let job = job.lock();
    require_owner(&job, &who)?;
    Ok(Json(job.metrics().to_vec()))
}
