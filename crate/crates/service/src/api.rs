use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pooltest::codec::{self, JsonProcedure};
use pooltest::enumeration::{catalan_upper_bound, count_naive, count_procedures, CountResult};
use pooltest::optimizer::find_optimal_in;
use pooltest::session::{required_zone_maps, simulate, simulate_uniform};
use pooltest::zones::{slice, square_grid, FrontierN2, Plane, SliceGrid, ZoneMapMetadata};
use pooltest::{EvalMode, Error, PriorVector, Session, SessionSnapshot, Strategy, TestResult, Value, ZoneMap};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::state::{AppState, INLINE_ZONE_LIMIT};

type ApiResult<T> = Result<T, ApiError>;

pub fn routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/v1/procedures/optimal", post(optimal))
        .route("/v1/zones/{n}", get(zone_metadata))
        .route("/v1/zones/{n}/slice", get(zone_slice))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/result", post(post_result))
        .route("/v1/simulations", post(run_simulation))
        .route("/v1/meta/counts", get(counts))
}

/// Bodies are parsed by hand so schema errors answer 400 rather than axum's 422.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

/// A prior given as a JSON number or as a string such as `"17/100"`.
#[derive(Deserialize)]
#[serde(untagged)]
enum PriorInput {
    Number(serde_json::Number),
    Text(String),
}

/// Parses priors; the flag is true when any was written as a fraction.
fn parse_priors(input: &[PriorInput]) -> ApiResult<(PriorVector, bool)> {
    if input.is_empty() {
        return Err(ApiError::BadRequest("priors must not be empty".into()));
    }
    let parts: Vec<String> = input
        .iter()
        .map(|p| match p {
            PriorInput::Number(x) => x.to_string(),
            PriorInput::Text(s) => s.clone(),
        })
        .collect();
    Ok(PriorVector::parse_components(&parts)?)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StrategyInput {
    Text(String),
    Tagged(Strategy),
}

impl StrategyInput {
    fn resolve(&self) -> ApiResult<Strategy> {
        match self {
            StrategyInput::Text(s) => Ok(s.parse()?),
            StrategyInput::Tagged(s) => Ok(*s),
        }
    }
}

#[derive(Deserialize, Clone, Copy, Default, PartialEq)]
#[serde(rename_all = "lowercase")]
enum OptimalMode {
    #[default]
    Float,
    Exact,
    /// Read the answer off the zone map.
    Zones,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimalRequest {
    priors: Vec<PriorInput>,
    #[serde(default)]
    mode: Option<OptimalMode>,
}

#[derive(Serialize)]
struct OptimalResponse {
    procedure: String,
    tree: JsonProcedure,
    expected_length: f64,
    /// Exact value as a fraction, in exact mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_length_exact: Option<String>,
    mode: &'static str,
}

async fn optimal(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<OptimalResponse>> {
    let req: OptimalRequest = parse_body(&body)?;
    let (priors, fraction) = parse_priors(&req.priors)?;
    let mode = match req.mode {
        Some(m) => m,
        None if fraction => OptimalMode::Exact,
        None => OptimalMode::Float,
    };
    if mode == OptimalMode::Zones {
        let map = state.zone_map(priors.n(), priors.n() <= INLINE_ZONE_LIMIT).await?;
        return blocking(move || {
            let (procedure, value) = map.evaluate_metaprocedure(priors.values())?;
            Ok(Json(OptimalResponse {
                procedure: procedure.to_string(),
                tree: codec::to_json(&procedure),
                expected_length: value,
                expected_length_exact: None,
                mode: "zones",
            }))
        })
        .await;
    }
    let limit = state.config.optimizer_limit;
    if priors.n() > limit {
        return Err(Error::UnsupportedSize {
            what: "the optimizer service",
            n: priors.n(),
            limit,
            hint: Some("use mode \"zones\" or a heuristic strategy"),
        }
        .into());
    }
    let eval = if mode == OptimalMode::Exact { EvalMode::Exact } else { EvalMode::Float };
    blocking(move || {
        let (procedure, value) = find_optimal_in(&priors, eval)?;
        let exact = match &value {
            Value::Exact(r) => Some(r.to_string()),
            Value::Float(_) => None,
        };
        Ok(Json(OptimalResponse {
            procedure: procedure.to_string(),
            tree: codec::to_json(&procedure),
            expected_length: value.to_f64(),
            expected_length_exact: exact,
            mode: if eval == EvalMode::Exact { "exact" } else { "float" },
        }))
    })
    .await
}

#[derive(Serialize)]
struct ZoneMetadataResponse {
    status: &'static str,
    #[serde(flatten)]
    metadata: ZoneMapMetadata,
}

fn parse_n(raw: &str) -> ApiResult<usize> {
    raw.parse().map_err(|_| ApiError::NotFound(format!("no zone map '{raw}'")))
}

async fn zone_metadata(State(state): State<Arc<AppState>>, Path(n): Path<String>) -> ApiResult<Json<ZoneMetadataResponse>> {
    let map = state.zone_map(parse_n(&n)?, false).await?;
    Ok(Json(ZoneMetadataResponse {
        status: "ready",
        metadata: map.metadata(),
    }))
}

#[derive(Deserialize)]
struct SliceQuery {
    /// `x`, `y`, `z`, `d`, or a full `z=0.17`.
    plane: Option<String>,
    value: Option<f64>,
    res: Option<usize>,
}

#[derive(Serialize)]
struct Frontiers {
    triple_point: f64,
    /// Polylines in `(x1, x2)` between the named zones.
    a_b: Vec<[f64; 2]>,
    a_c: Vec<[f64; 2]>,
    b_c: Vec<[f64; 2]>,
}

fn frontiers() -> Frontiers {
    let t = FrontierN2::triple_point();
    let steps = 64;
    let along = |lo: f64, hi: f64, f: &dyn Fn(f64) -> f64| -> Vec<[f64; 2]> {
        (0..=steps)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / steps as f64;
                [x, f(x)]
            })
            .collect()
    };
    Frontiers {
        triple_point: t,
        a_b: along(t, 1.0, &FrontierN2::a_b),
        a_c: along(0.0, t, &FrontierN2::a_c),
        b_c: vec![[0.0, 0.0], [t, t]],
    }
}

#[derive(Serialize)]
struct SliceResponse {
    n: usize,
    #[serde(flatten)]
    grid: SliceGrid,
    legend_trees: Vec<JsonProcedure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frontiers: Option<Frontiers>,
}

const DEFAULT_SLICE_RES: usize = 64;

async fn zone_slice(
    State(state): State<Arc<AppState>>,
    Path(n): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Json<SliceResponse>> {
    let n = parse_n(&n)?;
    let res = q.res.unwrap_or(DEFAULT_SLICE_RES);
    let plane = match (n, &q.plane, q.value) {
        (2, _, _) => None,
        (3, Some(p), Some(v)) => Some(format!("{p}={v}").parse::<Plane>()?),
        (3, Some(p), None) => Some(p.parse::<Plane>()?),
        (3, None, _) => return Err(ApiError::BadRequest("an n = 3 slice needs plane and value".into())),
        _ => return Err(ApiError::BadRequest("slices exist for n = 2 and n = 3 only".into())),
    };
    let map = state.zone_map(n, false).await?;
    blocking(move || {
        let grid = match plane {
            Some(plane) => slice(&map, plane, res)?,
            None => square_grid(&map, res)?,
        };
        Ok(Json(SliceResponse {
            n,
            grid,
            legend_trees: map.legend().iter().map(codec::to_json).collect(),
            frontiers: (n == 2).then(frontiers),
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    priors: Vec<PriorInput>,
    strategy: StrategyInput,
    /// Optional caller-chosen id.
    #[serde(default)]
    id: Option<String>,
    /// Procedure encoding, for the custom strategy.
    #[serde(default)]
    procedure: Option<String>,
}

fn check_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ApiError::BadRequest("session ids use 1 to 64 letters, digits, '-' or '_'".into()))
    }
}

async fn build_session(state: &Arc<AppState>, req: CreateSession) -> ApiResult<Session> {
    let (priors, _) = parse_priors(&req.priors)?;
    let strategy = req.strategy.resolve()?;
    let id = match req.id {
        Some(id) => {
            check_id(&id)?;
            id
        }
        None => uuid::Uuid::new_v4().simple().to_string(),
    };
    if strategy == Strategy::Custom {
        let text = req
            .procedure
            .ok_or_else(|| ApiError::BadRequest("a custom session needs a procedure".into()))?;
        let procedure = codec::decode(&text)?;
        return Ok(Session::from_procedure(id, priors, procedure)?);
    }
    if req.procedure.is_some() {
        return Err(ApiError::BadRequest("a procedure is only accepted with the custom strategy".into()));
    }
    let maps = state.zone_maps(&required_zone_maps(strategy, priors.n())?).await?;
    let state = state.clone();
    blocking(move || {
        let refs: Vec<&ZoneMap> = maps.iter().map(|m| m.as_ref()).collect();
        Ok(Session::start(id, priors, strategy, &state.session_context(&refs))?)
    })
    .await
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_body(&body)?;
    let session = build_session(&state, req).await?;
    let snapshot = session.snapshot();
    state.insert_session(session)?;
    Ok((StatusCode::CREATED, Json(snapshot)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionSnapshot>> {
    let slot = state.session(&id)?;
    let guard = slot.lock().await;
    if guard.closed {
        return Err(ApiError::NotFound(format!("no session '{id}'")));
    }
    Ok(Json(guard.session.snapshot()))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    state.close_session(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultRequest {
    /// `negative`/`positive` (also `-`/`+`).
    result: String,
    /// Number of results the client has seen; a stale value answers 409.
    #[serde(default)]
    step: Option<usize>,
}

async fn post_result(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionSnapshot>> {
    let req: ResultRequest = parse_body(&body)?;
    let result: TestResult = req.result.parse()?;
    let slot = state.session(&id)?;
    let mut guard = slot.lock().await;
    if guard.closed {
        return Err(ApiError::NotFound(format!("no session '{id}'")));
    }
    let step = guard.session.tests_used();
    if let Some(expected) = req.step {
        if expected != step {
            return Err(ApiError::Conflict(format!("session is at step {step}, not {expected}")));
        }
    }
    let mut updated = guard.session.clone();
    updated.record_result(result)?;
    state.save_session(&updated)?;
    guard.session = updated;
    Ok(Json(guard.session.snapshot()))
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum PriorDistribution {
    Uniform { n: usize },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulationRequest {
    #[serde(default)]
    priors: Option<Vec<PriorInput>>,
    #[serde(default)]
    prior_distribution: Option<PriorDistribution>,
    strategy: StrategyInput,
    trials: u64,
    #[serde(default)]
    seed: u64,
}

async fn run_simulation(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<pooltest::SimulationReport>> {
    let req: SimulationRequest = parse_body(&body)?;
    let strategy = req.strategy.resolve()?;
    let (priors, n) = match (&req.priors, &req.prior_distribution) {
        (Some(p), None) => {
            let (priors, _) = parse_priors(p)?;
            let n = priors.n();
            (Some(priors), n)
        }
        (None, Some(PriorDistribution::Uniform { n })) => (None, *n),
        _ => return Err(ApiError::BadRequest("give exactly one of priors and prior_distribution".into())),
    };
    let maps = state.zone_maps(&required_zone_maps(strategy, n)?).await?;
    let (trials, seed) = (req.trials, req.seed);
    blocking(move || {
        let refs: Vec<&ZoneMap> = maps.iter().map(|m| m.as_ref()).collect();
        let ctx = state.session_context(&refs);
        let report = match priors {
            Some(p) => simulate(&p, strategy, trials, seed, &ctx)?,
            None => simulate_uniform(n, strategy, trials, seed, &ctx)?,
        };
        Ok(Json(report))
    })
    .await
}

#[derive(Deserialize)]
struct CountsQuery {
    n: usize,
}

/// A count as a JSON number when it fits in u64, else as a decimal string.
fn count_json(c: &CountResult) -> serde_json::Value {
    match u64::try_from(&c.value) {
        Ok(v) => v.into(),
        Err(_) => c.value.to_string().into(),
    }
}

#[derive(Serialize)]
struct CountsResponse {
    n: usize,
    procedures: serde_json::Value,
    naive: serde_json::Value,
    catalan_bound: serde_json::Value,
    zones: Option<usize>,
    /// `ready`, `pending` (job running) or `unavailable` (n too large).
    zones_status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    zones_resolution: Option<u32>,
}

async fn counts(State(state): State<Arc<AppState>>, Query(q): Query<CountsQuery>) -> ApiResult<Json<CountsResponse>> {
    let n = q.n;
    let (procedures, naive, catalan) = blocking(move || {
        Ok((
            count_procedures(n)?,
            count_naive(n)?,
            catalan_upper_bound(n, None)?,
        ))
    })
    .await?;
    let (zones, zones_status, zones_resolution) = if n > pooltest::zones::ZONE_LIMIT {
        (None, "unavailable", None)
    } else {
        match state.zone_map(n, n <= INLINE_ZONE_LIMIT).await {
            Ok(map) => (Some(map.zone_count()), "ready", Some(map.resolution())),
            Err(ApiError::Pending(job)) => (None, "pending", Some(job.resolution)),
            Err(e) => return Err(e),
        }
    };
    Ok(Json(CountsResponse {
        n,
        procedures: count_json(&procedures),
        naive: count_json(&naive),
        catalan_bound: count_json(&catalan),
        zones,
        zones_status,
        zones_resolution,
    }))
}

