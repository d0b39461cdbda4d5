use std::sync::Arc;

use flaas_core::bundle::{UploadBundle, UploadEntry, WireBundle};
use flaas_core::codec::{model_from_b64, model_to_b64};
use flaas_core::global::{Coordinator, FinalReport, JobConfig, MetricRow, RoundStatus, Scenario};
use flaas_core::local::SharingMode;
use flaas_core::{
    init_model, AppId, Capability, GroupId, LabeledBatch, ModelParams, PermissionGrant, Scope, TrainConfig,
};
use flaas_server::api::{ErrorBody, JobSummary, ModelEnvelope, Selection};
use flaas_server::{ApiToken, BackgroundServer, Role, ServerConfig};
use reqwest::{Client, Method, StatusCode};
use serde_json::{json, Value};

const OWNER: &str = "owner-token";
const RIVAL: &str = "rival-token";

fn device_token(d: u32) -> String {
    format!("device-{d}")
}

fn server_config(devices: u32, data_dir: Option<std::path::PathBuf>) -> ServerConfig {
    let mut tokens = vec![
        ApiToken {
            token: OWNER.into(),
            principal: "acme".into(),
            role: Role::Customer,
        },
        ApiToken {
            token: RIVAL.into(),
            principal: "globex".into(),
            role: Role::Customer,
        },
    ];
    tokens.extend((0..devices).map(|d| ApiToken {
        token: device_token(d),
        principal: d.to_string(),
        role: Role::Device,
    }));
    ServerConfig {
        listen: ([127, 0, 0, 1], 0).into(),
        data_dir,
        payload_cap: 64 * 1024,
        tick_ms: 50,
        tokens,
        ..ServerConfig::default()
    }
}

fn app(s: &str) -> AppId {
    AppId::new(s).unwrap()
}

fn job_config(devices: u32) -> JobConfig {
    JobConfig {
        job_id: String::new(),
        scenario: Scenario::SingleApp { apps: vec![app("a")] },
        rounds: 20,
        client_fraction: 1.0,
        train: TrainConfig {
            epochs: 50,
            batch_size: 20,
            learning_rate: 0.003,
            seed: 3,
        },
        feature_dim: 2,
        num_classes: 2,
        round_timeout_secs: 3600.0,
        max_budget_rounds: 20,
        seed: 9,
        devices: (0..devices).collect(),
        grants: Vec::new(),
        observers: vec![app("outsider")],
        test_set: Some(LabeledBatch::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]).unwrap()),
        schema: None,
        parameter_self_tuning: false,
    }
}

fn group_config() -> JobConfig {
    JobConfig {
        scenario: Scenario::JointExisting {
            group: GroupId::new("g").unwrap(),
            members: vec![app("a"), app("b")],
            mode: SharingMode::DataShare,
        },
        ..job_config(2)
    }
}

fn share_data(source: &str) -> PermissionGrant {
    PermissionGrant {
        source: app(source),
        target: Scope::group("g").unwrap(),
        capability: Capability::ShareData,
        granted_at: 0,
    }
}

struct Harness {
    server: BackgroundServer,
    http: Client,
}

impl Harness {
    fn start(devices: u32) -> Self {
        Self::with_config(server_config(devices, None))
    }

    fn with_config(config: ServerConfig) -> Self {
        Self {
            server: BackgroundServer::start(config).unwrap(),
            http: Client::new(),
        }
    }

    async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = self
            .http
            .request(method, format!("{}/api/v1{path}", self.server.base_url()));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    async fn create(&self, config: &JobConfig) -> String {
        let (status, body) = self.call(Method::POST, "/jobs", Some(OWNER), Some(json!(config))).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["job_id"].as_str().unwrap().to_string()
    }

    async fn upload(&self, job: &str, round: u64, device: u32, model: &ModelParams, n: u64) -> (StatusCode, Value) {
        let bundle = bundle(device, round, "app:a", model, n);
        self.call(
            Method::POST,
            &format!("/jobs/{job}/rounds/{round}/updates"),
            Some(&device_token(device)),
            Some(json!(bundle)),
        )
        .await
    }

    fn coordinator(&self) -> &Arc<Coordinator> {
        self.server.coordinator()
    }

    /// Everything observable about a job, for before/after comparisons.
    fn snapshot(&self, job: &str) -> String {
        let job = self.coordinator().job(job).unwrap();
        let job = job.lock();
        format!(
            "{:?}|{}|{:?}|{:?}|{:?}|{:?}|{:?}",
            job.status(),
            job.budget_rounds(),
            job.current_round(),
            job.open_round_state().map(|o| o.updates.clone()),
            job.model_history(),
            job.metrics(),
            job.registry()
        )
    }
}

fn bundle(device: u32, round: u64, scope: &str, model: &ModelParams, n: u64) -> WireBundle {
    UploadBundle {
        device_id: device,
        round,
        compressed: device.is_multiple_of(2),
        entries: vec![UploadEntry {
            scope: scope.parse().unwrap(),
            model: model.clone(),
            sample_count: n,
        }],
    }
    .to_wire()
}

fn model(w: [f64; 4]) -> ModelParams {
    ModelParams::from_parts(2, 2, w.to_vec(), vec![0.0, 0.0]).unwrap()
}

#[tokio::test]
async fn create_job_validation_and_roles() {
    let h = Harness::start(4);
    let id = h.create(&job_config(4)).await;
    assert!(!id.is_empty());

    let mut bad = job_config(4);
    bad.client_fraction = 1.5;
    let (status, body) = h.call(Method::POST, "/jobs", Some(OWNER), Some(json!(bad))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert!(err.message.contains("client_fraction"));

    let (status, _) = h
        .call(
            Method::POST,
            "/jobs",
            Some(&device_token(0)),
            Some(json!(job_config(4))),
        )
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = h.call(Method::POST, "/jobs", None, Some(json!(job_config(4)))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = h
        .call(Method::POST, "/jobs", Some("forged"), Some(json!(job_config(4))))
        .await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let (status, body) = h
        .call(Method::POST, "/jobs", Some(OWNER), Some(json!(group_config())))
        .await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");

    let mut tuned = job_config(4);
    tuned.parameter_self_tuning = true;
    let (status, body) = h.call(Method::POST, "/jobs", Some(OWNER), Some(json!(tuned))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["message"].as_str().unwrap().contains("unsupported"));

    let (status, _) = h
        .call(Method::POST, "/jobs", Some(OWNER), Some(json!({"nonsense": true})))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = h.call(Method::GET, "/jobs", Some(OWNER), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.as_array().unwrap().len(), 1);
    let (_, body) = h.call(Method::GET, "/jobs", Some(RIVAL), None).await;
    assert!(body.as_array().unwrap().is_empty());
    assert_eq!(h.coordinator().job_ids(), vec![id]);
}

#[tokio::test]
async fn job_summary_hides_test_set() {
    let h = Harness::start(2);
    let id = h.create(&job_config(2)).await;
    let (status, body) = h
        .call(Method::GET, &format!("/jobs/{id}"), Some(&device_token(1)), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    let summary: JobSummary = serde_json::from_value(body).unwrap();
    assert_eq!(summary.current_round, Some(1));
    assert_eq!(summary.last_closed, 0);
    assert!(summary.config.test_set.is_none());
    let (status, _) = h.call(Method::GET, &format!("/jobs/{id}"), Some(RIVAL), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = h.call(Method::GET, "/jobs/nope", Some(OWNER), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn grants_are_atomic_and_unblock_data_share() {
    let h = Harness::start(2);
    let id = h.create(&job_config(2)).await;
    let before = h.snapshot(&id);
    let path = format!("/jobs/{id}/permissions");

    let (status, _) = h.call(Method::POST, &path, Some(OWNER), Some(json!([]))).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(h.snapshot(&id), before);

    let good = PermissionGrant {
        source: app("a"),
        target: Scope::app("outsider").unwrap(),
        capability: Capability::ReadGlobalModel,
        granted_at: 0,
    };
    let unknown = PermissionGrant {
        source: app("ghost"),
        ..good.clone()
    };
    let (status, _) = h
        .call(Method::POST, &path, Some(OWNER), Some(json!([good, unknown])))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.snapshot(&id), before);

    let (status, _) = h.call(Method::POST, &path, Some(RIVAL), Some(json!([good]))).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = h
        .call(Method::POST, &path, Some(&device_token(0)), Some(json!([good])))
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(h.snapshot(&id), before);

    let (status, _) = h.call(Method::POST, &path, Some(OWNER), Some(json!([good]))).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_ne!(h.snapshot(&id), before);
    let (status, _) = h
        .call(Method::POST, "/jobs/missing/permissions", Some(OWNER), Some(json!([])))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let mut joint = group_config();
    joint.grants = vec![share_data("a"), share_data("b")];
    h.create(&joint).await;
}

#[tokio::test]
async fn selection_is_stable() {
    let h = Harness::start(10);
    let mut config = job_config(10);
    config.client_fraction = 0.3;
    let id = h.create(&config).await;
    let path = format!("/jobs/{id}/rounds/1/selection");
    let (status, first) = h.call(Method::GET, &path, Some(&device_token(4)), None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, second) = h.call(Method::GET, &path, Some(OWNER), None).await;
    assert_eq!(first, second);
    let sel: Selection = serde_json::from_value(first).unwrap();
    assert_eq!(sel.devices.len(), 3);

    let (status, _) = h
        .call(
            Method::GET,
            &format!("/jobs/{id}/rounds/2/selection"),
            Some(OWNER),
            None,
        )
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = h
        .call(Method::GET, "/jobs/zzz/rounds/1/selection", Some(OWNER), None)
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let all = h.create(&job_config(10)).await;
    let (_, body) = h
        .call(
            Method::GET,
            &format!("/jobs/{all}/rounds/1/selection"),
            Some(OWNER),
            None,
        )
        .await;
    assert_eq!(body["devices"], json!((0..10).collect::<Vec<u32>>()));
}

#[tokio::test]
async fn update_flow_and_rejections() {
    let h = Harness::start(3);
    let mut config = job_config(3);
    config.client_fraction = 0.5;
    let id = h.create(&config).await;
    let (_, sel) = h
        .call(
            Method::GET,
            &format!("/jobs/{id}/rounds/1/selection"),
            Some(OWNER),
            None,
        )
        .await;
    let sel: Selection = serde_json::from_value(sel).unwrap();
    assert_eq!(sel.devices.len(), 2);
    let chosen = sel.devices[0];
    let other = (0..3).find(|d| !sel.devices.contains(d)).unwrap();
    let m = model([1.0, 0.0, 0.0, 1.0]);

    let (status, _) = h.upload(&id, 1, other, &m, 10).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // A device token cannot speak for another device.
    let before = h.snapshot(&id);
    let forged = bundle(chosen, 1, "app:a", &m, 10);
    let (status, _) = h
        .call(
            Method::POST,
            &format!("/jobs/{id}/rounds/1/updates"),
            Some(&device_token(other)),
            Some(json!(forged)),
        )
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = h
        .call(
            Method::POST,
            &format!("/jobs/{id}/rounds/1/updates"),
            Some(OWNER),
            Some(json!(forged)),
        )
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let mut broken = json!(forged);
    broken["entries"][0]["payload_b64"] = json!("!!!");
    let (status, _) = h
        .call(
            Method::POST,
            &format!("/jobs/{id}/rounds/1/updates"),
            Some(&device_token(chosen)),
            Some(broken),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let wide = ModelParams::zeros(3, 2).unwrap();
    let (status, body) = h.upload(&id, 1, chosen, &wide, 10).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad_payload");
    let (status, _) = h.upload(&id, 2, chosen, &m, 10).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(h.snapshot(&id), before);

    let (status, body) = h.upload(&id, 1, chosen, &m, 10).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body["replaced"], false);
    let (status, body) = h.upload(&id, 1, chosen, &m, 10).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body["replaced"], true);

    // The last selected device closes the round.
    let (status, _) = h.upload(&id, 1, sel.devices[1], &model([0.0, 1.0, 1.0, 0.0]), 30).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, body) = h.upload(&id, 1, chosen, &m, 10).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "round_closed");

    let (_, env) = h
        .call(
            Method::GET,
            &format!("/jobs/{id}/model?scope=app:a&round=1"),
            Some(OWNER),
            None,
        )
        .await;
    let env: ModelEnvelope = serde_json::from_value(env).unwrap();
    let agg = model_from_b64(&env.payload_b64, env.compressed).unwrap();
    assert_eq!(agg.weights(), &[0.25, 0.75, 0.75, 0.25]);
}

#[tokio::test]
async fn oversized_payload_is_rejected() {
    let h = Harness::start(1);
    let id = h.create(&job_config(1)).await;
    let big = "x".repeat(128 * 1024);
    let resp = h
        .http
        .post(format!("{}/api/v1/jobs/{id}/rounds/1/updates", h.server.base_url()))
        .bearer_auth(device_token(0))
        .header("content-type", "application/json")
        .body(big)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn model_download_and_read_permissions() {
    let h = Harness::start(2);
    let id = h.create(&job_config(2)).await;
    let path = format!("/jobs/{id}/model?scope=app:a&round=0");
    let (status, body) = h.call(Method::GET, &path, Some(&device_token(0)), None).await;
    assert_eq!(status, StatusCode::OK);
    let env: ModelEnvelope = serde_json::from_value(body).unwrap();
    let init = init_model(2, 2, 9).unwrap();
    assert_eq!(model_from_b64(&env.payload_b64, false).unwrap(), init);
    assert_eq!(env.payload_b64, model_to_b64(&init, false));

    let outsider = format!("{path}&app=outsider");
    let (status, _) = h.call(Method::GET, &outsider, Some(&device_token(0)), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = h.call(Method::GET, &path, Some(RIVAL), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let grant = PermissionGrant {
        source: app("a"),
        target: Scope::app("outsider").unwrap(),
        capability: Capability::ReadGlobalModel,
        granted_at: 0,
    };
    h.call(
        Method::POST,
        &format!("/jobs/{id}/permissions"),
        Some(OWNER),
        Some(json!([grant])),
    )
    .await;
    let (status, _) = h.call(Method::GET, &outsider, Some(&device_token(0)), None).await;
    assert_eq!(status, StatusCode::OK);

    let (status, _) = h
        .call(
            Method::GET,
            &format!("/jobs/{id}/model?scope=app:a&round=7"),
            Some(OWNER),
            None,
        )
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = h
        .call(
            Method::GET,
            &format!("/jobs/{id}/model?scope=app:zz&round=0"),
            Some(OWNER),
            None,
        )
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = h
        .call(
            Method::GET,
            &format!("/jobs/{id}/model?scope=bogus&round=0"),
            Some(OWNER),
            None,
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut joint = group_config();
    joint.grants = vec![share_data("a"), share_data("b")];
    let gid = h.create(&joint).await;
    let (status, body) = h
        .call(
            Method::GET,
            &format!("/jobs/{gid}/model?scope=group:g&app=b"),
            Some(&device_token(1)),
            None,
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
}

#[tokio::test]
async fn metrics_close_and_terminate() {
    let h = Harness::start(2);
    let id = h.create(&job_config(2)).await;
    let m = model([2.0, -2.0, -2.0, 2.0]);
    h.upload(&id, 1, 0, &m, 5).await;
    let close = |r: u64| format!("/jobs/{id}/rounds/{r}/close");
    let (status, body) = h.call(Method::POST, &close(1), Some(OWNER), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "aggregated");
    let (status, _) = h.call(Method::POST, &close(1), Some(OWNER), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = h.call(Method::POST, &close(2), Some(RIVAL), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    h.call(Method::POST, &close(2), Some(OWNER), None).await;
    h.upload(&id, 3, 1, &m, 5).await;
    h.call(Method::POST, &close(3), Some(OWNER), None).await;

    let (status, body) = h
        .call(Method::GET, &format!("/jobs/{id}/metrics"), Some(OWNER), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    let rows: Vec<MetricRow> = serde_json::from_value(body).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r.accuracy.is_some_and(|a| (0.0..=1.0).contains(&a))));
    assert_eq!(rows[1].status, RoundStatus::TimedOut);
    assert_eq!(rows[0].accuracy, Some(1.0));
    let (status, _) = h
        .call(
            Method::GET,
            &format!("/jobs/{id}/metrics"),
            Some(&device_token(0)),
            None,
        )
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = h.call(Method::GET, "/jobs/none/metrics", Some(OWNER), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let before = h.snapshot(&id);
    let (status, _) = h.call(Method::DELETE, &format!("/jobs/{id}"), Some(RIVAL), None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = h
        .call(Method::DELETE, &format!("/jobs/{id}"), Some(&device_token(0)), None)
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(h.snapshot(&id), before);

    let (status, body) = h.call(Method::DELETE, &format!("/jobs/{id}"), Some(OWNER), None).await;
    assert_eq!(status, StatusCode::OK);
    let report: FinalReport = serde_json::from_value(body).unwrap();
    assert_eq!(report.history.len(), 3);
    let (status, again) = h.call(Method::DELETE, &format!("/jobs/{id}"), Some(OWNER), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<FinalReport>(again).unwrap(), report);
    let (status, _) = h.upload(&id, 4, 0, &m, 5).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = h.call(Method::DELETE, "/jobs/none", Some(OWNER), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn budget_cap_stops_job() {
    let h = Harness::start(1);
    let id = h.create(&job_config(1)).await;
    let (status, body) = h
        .call(
            Method::PUT,
            &format!("/jobs/{id}/budget"),
            Some(OWNER),
            Some(json!({"max_budget_rounds": 2})),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    for r in 1..=2 {
        h.call(Method::POST, &format!("/jobs/{id}/rounds/{r}/close"), Some(OWNER), None)
            .await;
    }
    let (_, body) = h.call(Method::GET, &format!("/jobs/{id}"), Some(OWNER), None).await;
    assert_eq!(body["status"], "terminated");
    assert_eq!(body["last_closed"], 2);
}

#[tokio::test]
async fn deadline_ticker_closes_rounds() {
    let h = Harness::start(2);
    let mut config = job_config(2);
    config.round_timeout_secs = 0.05;
    let id = h.create(&config).await;
    let mut closed = 0;
    for _ in 0..100 {
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        closed = h.coordinator().job(&id).unwrap().lock().last_closed();
        if closed >= 1 {
            break;
        }
    }
    assert!(closed >= 1);
    let (_, body) = h
        .call(Method::GET, &format!("/jobs/{id}/metrics"), Some(OWNER), None)
        .await;
    assert_eq!(body[0]["status"], "timed_out");
}

#[tokio::test]
async fn restart_resumes_persisted_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let config = server_config(2, Some(dir.path().to_path_buf()));
    let m = model([1.0, 0.5, 0.5, 1.0]);
    let (id, history) = {
        let h = Harness::with_config(config.clone());
        let id = h.create(&job_config(2)).await;
        for r in 1..=2 {
            h.upload(&id, r, 0, &m, 3).await;
            h.upload(&id, r, 1, &model([0.0, 0.0, 1.0, 1.0]), 1).await;
        }
        h.upload(&id, 3, 0, &m, 3).await;
        let history = h.coordinator().job(&id).unwrap().lock().model_history().to_vec();
        (id, history)
    };
    let h = Harness::with_config(config);
    let job = h.coordinator().job(&id).unwrap();
    assert_eq!(job.lock().model_history(), &history[..]);
    assert_eq!(job.lock().current_round(), Some(3));
    let (status, _) = h.upload(&id, 3, 0, &m, 3).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (_, body) = h
        .call(Method::GET, &format!("/jobs/{id}/metrics"), Some(OWNER), None)
        .await;
    assert_eq!(body.as_array().unwrap().len(), 2);
}
