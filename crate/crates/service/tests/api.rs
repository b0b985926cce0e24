use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pooltest_service::{app, AppState, ServiceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const FIG9_LEFT: &str =
    "P{1,2,3}[L(000),P{1,2}[L(001),P{1,3}[L(010),P{1}[L(011),P{2,3}[L(100),P{2}[L(101),P{3}[L(110),L(111)]]]]]]]";

fn config(dir: &TempDir) -> ServiceConfig {
    let mut config = ServiceConfig::new(dir.path());
    // small grids keep the suite fast; 52 zones already hold at R = 64
    config.resolutions.insert(2, 128);
    config.resolutions.insert(3, 64);
    config.resolutions.insert(4, 8);
    config
}

fn server(dir: &TempDir) -> Router {
    app(AppState::open(config(dir)).unwrap())
}

async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

#[tokio::test]
async fn optimal_at_counterexample_point() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let (status, body) = call(&app, Method::POST, "/v1/procedures/optimal", Some(json!({"priors": [0.01, 0.17, 0.51]}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!((body["expected_length"].as_f64().unwrap() - 1.889).abs() < 1e-3);
    assert_eq!(body["procedure"], FIG9_LEFT);
    assert_eq!(body["mode"], "float");
    assert_eq!(body["tree"]["tree"]["pool"], json!([1, 2, 3]));

    // fractions switch to exact arithmetic: 1 + x2 + 2x1 − x1x2 at (1/10, 1/5)
    let (status, body) = call(&app, Method::POST, "/v1/procedures/optimal", Some(json!({"priors": ["1/10", "1/5"]}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["mode"], "exact");
    assert_eq!(body["expected_length_exact"], "69/50");

    let (status, body) = call(
        &app,
        Method::POST,
        "/v1/procedures/optimal",
        Some(json!({"priors": [0.01, 0.17, 0.51], "mode": "zones"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["procedure"], FIG9_LEFT);
}

#[tokio::test]
async fn error_statuses() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let optimal = |body: Value| call(&app, Method::POST, "/v1/procedures/optimal", Some(body));
    assert_eq!(optimal(json!({"priors": [0.2, 1.5]})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(optimal(json!({"priors": []})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(optimal(json!({"prior": [0.2]})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(optimal(json!({"priors": [0.2], "mode": "fast"})).await.0, StatusCode::BAD_REQUEST);
    let (status, body) = optimal(json!({"priors": vec![0.1; 7]})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "unsupported_size");
    assert!(body["error"]["message"].as_str().unwrap().contains("n <= 6"));

    let (status, _) = call_raw(&app, Method::POST, "/v1/sessions", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, Method::GET, "/v1/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::DELETE, "/v1/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::GET, "/v1/zones/five", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::GET, "/v1/zones/5", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, Method::GET, "/v1/meta/counts?n=7", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_strategy = json!({"priors": [0.1], "strategy": "best"});
    assert_eq!(call(&app, Method::POST, "/v1/sessions", Some(bad_strategy)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn session_flow() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let (status, created) = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"priors": [0.01, 0.17, 0.51], "strategy": "optimal"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["next_pool"], json!([1, 2, 3]));
    assert!((created["expected_remaining"].as_f64().unwrap() - 1.889).abs() < 1e-3);
    let id = created["id"].as_str().unwrap().to_string();
    assert!(dir.path().join("sessions").join(format!("{id}.json")).exists());

    let uri = format!("/v1/sessions/{id}/result");
    let (status, done) = call(&app, Method::POST, &uri, Some(json!({"result": "negative", "step": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(done["status"], "complete");
    assert_eq!(done["outcome"], "000");
    assert_eq!(done["step"], 1);
    assert_eq!(done["known"], "000");

    let (status, body) = call(&app, Method::POST, &uri, Some(json!({"result": "positive"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "session_complete");

    let (status, snapshot) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(snapshot, done);

    assert_eq!(call(&app, Method::DELETE, &format!("/v1/sessions/{id}"), None).await.0, StatusCode::NO_CONTENT);
    assert_eq!(call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
    assert!(!dir.path().join("sessions").join(format!("{id}.json")).exists());
}

#[tokio::test]
async fn naive_and_custom_sessions() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let (_, s) = call(&app, Method::POST, "/v1/sessions", Some(json!({"priors": [0.9, 0.9], "strategy": "optimal", "id": "lab-1"}))).await;
    assert_eq!(s["id"], "lab-1");
    assert_eq!(s["next_pool"], json!([1]));
    let (_, s) = call(&app, Method::POST, "/v1/sessions/lab-1/result", Some(json!({"result": "+"}))).await;
    assert_eq!(s["next_pool"], json!([2]));
    let (_, s) = call(&app, Method::POST, "/v1/sessions/lab-1/result", Some(json!({"result": "-"}))).await;
    assert_eq!(s["outcome"], "10");
    assert_eq!(s["step"], 2);
    let dup = json!({"priors": [0.5], "strategy": "naive", "id": "lab-1"});
    assert_eq!(call(&app, Method::POST, "/v1/sessions", Some(dup)).await.0, StatusCode::CONFLICT);
    let bad_id = json!({"priors": [0.5], "strategy": "naive", "id": "../x"});
    assert_eq!(call(&app, Method::POST, "/v1/sessions", Some(bad_id)).await.0, StatusCode::BAD_REQUEST);

    let custom = json!({
        "priors": [0.1, 0.2],
        "strategy": {"kind": "custom"},
        "procedure": "P{1,2}[L(00),P{1}[L(01),P{2}[L(10),L(11)]]]",
    });
    let (status, s) = call(&app, Method::POST, "/v1/sessions", Some(custom)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert!((s["expected_remaining"].as_f64().unwrap() - 1.38).abs() < 1e-12);
    let invalid = json!({"priors": [0.1, 0.2], "strategy": "custom", "procedure": "P{1}[L(00),L(11)]"});
    assert_eq!(call(&app, Method::POST, "/v1/sessions", Some(invalid)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn zone_backed_sessions() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let (status, s) = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"priors": [0.01, 0.17, 0.51], "strategy": "metaprocedure"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(s["next_pool"], json!([1, 2, 3]));

    let (status, s) = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"priors": [0.05, 0.1, 0.2, 0.3, 0.9], "strategy": {"kind": "pairing", "k": 3, "seed": 7}})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(s["procedures"].as_array().unwrap().len(), 2);
    let id = s["id"].as_str().unwrap().to_string();
    let truth = [false, true, false, false, true];
    let mut snapshot = s;
    while let Some(pool) = snapshot["next_pool"].as_array() {
        let positive = pool.iter().any(|i| truth[i.as_u64().unwrap() as usize - 1]);
        let result = if positive { "positive" } else { "negative" };
        snapshot = call(&app, Method::POST, &format!("/v1/sessions/{id}/result"), Some(json!({"result": result}))).await.1;
    }
    assert_eq!(snapshot["outcome"], "01001");
    assert!(dir.path().join("zones/zonemap-n2-r128-float.json").exists());
    assert!(dir.path().join("zones/zonemap-n3-r64-float.json").exists());
}

#[tokio::test]
async fn concurrent_results_on_one_session() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let body = json!({"priors": [0.5, 0.5, 0.5], "strategy": "naive", "id": "race"});
    assert_eq!(call(&app, Method::POST, "/v1/sessions", Some(body)).await.0, StatusCode::CREATED);

    let posts: Vec<_> = (0..16)
        .map(|i| {
            let app = app.clone();
            let result = if i % 2 == 0 { "positive" } else { "negative" };
            tokio::spawn(async move {
                call(&app, Method::POST, "/v1/sessions/race/result", Some(json!({"result": result, "step": 0}))).await.0
            })
        })
        .collect();
    let mut statuses = Vec::new();
    for p in posts {
        statuses.push(p.await.unwrap());
    }
    assert_eq!(statuses.iter().filter(|&&s| s == StatusCode::OK).count(), 1);
    assert_eq!(statuses.iter().filter(|&&s| s == StatusCode::CONFLICT).count(), 15);

    // without a step the posts serialize: two more land, later ones see a complete session
    let posts: Vec<_> = (0..6)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, Method::POST, "/v1/sessions/race/result", Some(json!({"result": "negative"}))).await.0 })
        })
        .collect();
    let mut ok = 0;
    for p in posts {
        match p.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => {}
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!(ok, 2);
    let (_, snap) = call(&app, Method::GET, "/v1/sessions/race", None).await;
    assert_eq!(snap["step"], 3);
    assert_eq!(snap["status"], "complete");
    assert_eq!(snap["history"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn restart_restores_sessions_and_answers_identically() {
    let dir = TempDir::new().unwrap();
    let queries = [
        "/v1/zones/3",
        "/v1/zones/3/slice?plane=z&value=0.17&res=32",
        "/v1/zones/2/slice?res=16",
        "/v1/meta/counts?n=3",
    ];
    let (before, snapshot) = {
        let app = server(&dir);
        let body = json!({"priors": [0.1, 0.2, 0.3], "strategy": "greedy", "id": "keep"});
        call(&app, Method::POST, "/v1/sessions", Some(body)).await;
        let (_, snap) = call(&app, Method::POST, "/v1/sessions/keep/result", Some(json!({"result": "positive"}))).await;
        let mut out = Vec::new();
        for q in queries {
            out.push(call_raw(&app, Method::GET, q, None).await);
        }
        (out, snap)
    };
    let app = server(&dir);
    let (status, restored) = call(&app, Method::GET, "/v1/sessions/keep", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(restored, snapshot);
    for (q, old) in queries.iter().zip(before) {
        assert_eq!(old.0, StatusCode::OK, "{q}");
        assert_eq!(call_raw(&app, Method::GET, q, None).await, old, "{q}");
    }
}

#[tokio::test]
async fn zone_endpoints() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let (status, meta) = call(&app, Method::GET, "/v1/zones/2", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(meta["status"], "ready");
    assert_eq!(meta["zones"], 3);
    assert_eq!(meta["resolution"], 128);

    let (status, square) = call(&app, Method::GET, "/v1/zones/2/slice?res=32", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: std::collections::BTreeSet<u64> = square["ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(ids.len(), 3);
    assert_eq!(square["legend"].as_array().unwrap().len(), 3);
    let t = square["frontiers"]["triple_point"].as_f64().unwrap();
    assert!((t - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-12);

    let (status, cut) = call(&app, Method::GET, "/v1/zones/3/slice?plane=z&value=0.17&res=48", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(cut["plane"], "z=0.17");
    assert_eq!(cut["ids"].as_array().unwrap().len(), 48 * 48);
    let distinct: std::collections::BTreeSet<u64> = cut["ids"].as_array().unwrap().iter().filter_map(Value::as_u64).collect();
    assert!(distinct.len() > 1 && distinct.len() <= 52);
    assert_eq!(cut["legend_trees"].as_array().unwrap().len(), cut["legend"].as_array().unwrap().len());

    let (status, same) = call(&app, Method::GET, "/v1/zones/3/slice?plane=z%3D0.17&res=48", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(same["ids"], cut["ids"]);
    assert_eq!(call(&app, Method::GET, "/v1/zones/3/slice", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, Method::GET, "/v1/zones/3/slice?plane=z&value=1.5", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, Method::GET, "/v1/zones/4/slice?plane=z&value=0.5", None).await.0, StatusCode::BAD_REQUEST);

    let (status, counts) = call(&app, Method::GET, "/v1/meta/counts?n=3", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(counts["procedures"], 312);
    assert_eq!(counts["zones"], 52);
    assert_eq!(counts["naive"], 12);
    let (_, counts) = call(&app, Method::GET, "/v1/meta/counts?n=6", None).await;
    assert!(counts["procedures"].as_str().unwrap().starts_with("22"));
    assert_eq!(counts["zones_status"], "unavailable");
}

#[tokio::test]
async fn large_zone_map_runs_as_a_job() {
    let dir = TempDir::new().unwrap();
    let mut config = config(&dir);
    config.pending_grace = Duration::ZERO;
    let app = app(AppState::open(config).unwrap());
    let (status, pending) = call(&app, Method::GET, "/v1/zones/4", None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(pending["status"], "pending");
    assert_eq!(pending["resolution"], 8);
    let (_, counts) = call(&app, Method::GET, "/v1/meta/counts?n=4", None).await;
    assert_eq!(counts["procedures"], 36585024);
    let mut tries = 0;
    let meta = loop {
        let (status, body) = call(&app, Method::GET, "/v1/zones/4", None).await;
        if status == StatusCode::OK {
            break body;
        }
        assert_eq!(status, StatusCode::ACCEPTED);
        tries += 1;
        assert!(tries < 600, "zone job did not finish");
        tokio::time::sleep(Duration::from_millis(100)).await;
    };
    assert_eq!(meta["n"], 4);
    assert!(meta["zones"].as_u64().unwrap() > 1);
}

#[tokio::test]
async fn simulations() {
    let dir = TempDir::new().unwrap();
    let app = server(&dir);
    let (status, report) = call(
        &app,
        Method::POST,
        "/v1/simulations",
        Some(json!({"priors": [0.01, 0.17, 0.51], "strategy": "optimal", "trials": 100000, "seed": 11})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (mean, se, expected) = (
        report["mean_tests"].as_f64().unwrap(),
        report["std_error"].as_f64().unwrap(),
        report["expected_tests"].as_f64().unwrap(),
    );
    assert!((expected - 1.889).abs() < 1e-3);
    assert!((mean - expected).abs() < 3.0 * se);
    assert_eq!(report["seed"], 11);
    assert_eq!(report["strategy"], json!({"kind": "optimal"}));

    let body = json!({"prior_distribution": {"kind": "uniform", "n": 2}, "strategy": "naive", "trials": 1000});
    let (status, report) = call(&app, Method::POST, "/v1/simulations", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["mean_tests"], 2.0);

    let both = json!({"priors": [0.5], "prior_distribution": {"kind": "uniform", "n": 1}, "strategy": "naive", "trials": 10});
    assert_eq!(call(&app, Method::POST, "/v1/simulations", Some(both)).await.0, StatusCode::BAD_REQUEST);
    let zero = json!({"priors": [0.5], "strategy": "naive", "trials": 0});
    assert_eq!(call(&app, Method::POST, "/v1/simulations", Some(zero)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn static_bundle_is_served_when_configured() {
    let dir = TempDir::new().unwrap();
    let web = TempDir::new().unwrap();
    std::fs::write(web.path().join("index.html"), "<p>ui</p>").unwrap();
    let mut config = config(&dir);
    config.static_dir = Some(web.path().to_path_buf());
    let app = app(AppState::open(config).unwrap());
    let (status, bytes) = call_raw(&app, Method::GET, "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"<p>ui</p>");
}

#[test]
fn config_rejects_bad_limits() {
    let dir = TempDir::new().unwrap();
    let mut config = config(&dir);
    config.optimizer_limit = 0;
    assert!(AppState::open(config).is_err());
    let _: Arc<AppState> = AppState::open(ServiceConfig::new(dir.path())).unwrap();
}
