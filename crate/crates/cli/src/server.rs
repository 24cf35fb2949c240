//! JSON-over-HTTP API used by the annotation console.
//!
//! Request bodies are parsed by hand so that malformed input yields a
//! structured `{"error", "reason"}` reply instead of a bare rejection.
//! Every write goes through [`Project`], so the files left on disk match
//! what the equivalent CLI command would write.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use simpa_core::annotation::{AlphaMetric, BundleAnnotation, BundleLabel, MatchAnnotation, MATCH_SCHEME};
use simpa_core::feedback::{LoopReport, PromotionMode};
use simpa_core::project::Project;
use simpa_core::tasks::{bundle_task_id, bundle_tasks, match_task_id, match_tasks, LeaseTable, QueueParams};
use simpa_core::taxonomy::Key;
use simpa_core::Error;
use tower_http::services::ServeDir;

use crate::metrics::{self, Source};

pub struct AppState {
    pub project: Project,
    pub leases: Mutex<LeaseTable>,
    /// Bearer token required on writes, when configured.
    pub token: Option<String>,
}

impl AppState {
    pub fn new(project: Project) -> Self {
        let token = project
            .config()
            .server
            .api_token_env
            .as_deref()
            .and_then(|v| std::env::var(v).ok())
            .filter(|t| !t.is_empty());
        AppState {
            project,
            leases: Mutex::new(LeaseTable::default()),
            token,
        }
    }
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    reason: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, reason: impl Into<String>) -> Self {
        ApiError {
            status,
            error,
            reason: reason.into(),
        }
    }

    fn bad_request(reason: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", reason)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, error) = match &e {
            Error::Parse { .. }
            | Error::Taxonomy(_)
            | Error::InvalidTrs { .. }
            | Error::DuplicateId(_)
            | Error::UnknownTrs(_)
            | Error::InvalidComment { .. }
            | Error::InvalidArgument(_)
            | Error::Json(_)
            | Error::Csv(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            Error::InvalidAnnotation(_) => (StatusCode::BAD_REQUEST, "invalid_annotation"),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Locked(_) => (StatusCode::CONFLICT, "locked"),
            Error::Backend { .. } | Error::Service { .. } => (StatusCode::BAD_GATEWAY, "upstream"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let mut reason = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(inner) = source {
            reason.push_str(": ");
            reason.push_str(&inner.to_string());
            source = inner.source();
        }
        ApiError::new(status, error, reason)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.error, "reason": self.reason }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn check_auth(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let Some(token) = &state.token else { return Ok(()) };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token"))
    }
}

/// Runs blocking project work off the async executor.
async fn blocking<T, F>(state: &Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn ok_json<T: Serialize>(v: &T) -> Response {
    Json(serde_json::to_value(v).unwrap_or(Value::Null)).into_response()
}

pub fn router(state: AppState, console_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/scheme", get(scheme))
        .route("/api/trs", get(list_sets))
        .route("/api/trs/{name}", get(get_set))
        .route("/api/trs/{name}/lineage", get(set_lineage))
        .route("/api/runs", get(list_runs).post(start_run))
        .route("/api/runs/{run}", get(get_run))
        .route("/api/runs/{run}/matches", get(run_matches))
        .route("/api/tasks/match", get(match_queue))
        .route("/api/tasks/bundle", get(bundle_queue))
        .route("/api/annotations/match", get(list_match_annotations).post(add_match_annotation))
        .route("/api/annotations/bundle", get(list_bundle_annotations).post(add_bundle_annotation))
        .route("/api/promotions", get(list_promotions).post(approve_promotions))
        .route("/api/loop/run", post(start_loop))
        .route("/api/loop/status", get(loop_status))
        .route("/api/scores/{target}", get(target_scores))
        .route("/api/reports/{kind}", get(report))
        .with_state(Arc::new(state));
    match console_dir {
        Some(dir) => api.nest_service("/console", ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(project: Project, bind: &str, console_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(project), console_dir)).await?;
    Ok(())
}

async fn scheme() -> Response {
    ok_json(&MATCH_SCHEME)
}

async fn list_sets(State(s): State<Shared>) -> ApiResult<Response> {
    blocking(&s, |s| Ok(ok_json(&s.project.list_sets()?))).await
}

async fn get_set(State(s): State<Shared>, Path(name): Path<String>) -> ApiResult<Response> {
    blocking(&s, move |s| Ok(ok_json(&s.project.load_set(&name)?))).await
}

async fn set_lineage(State(s): State<Shared>, Path(name): Path<String>) -> ApiResult<Response> {
    blocking(&s, move |s| Ok(ok_json(&s.project.lineage(&name)?))).await
}

async fn list_runs(State(s): State<Shared>) -> ApiResult<Response> {
    blocking(&s, |s| Ok(ok_json(&s.project.runs()?))).await
}

async fn get_run(State(s): State<Shared>, Path(run): Path<String>) -> ApiResult<Response> {
    blocking(&s, move |s| Ok(ok_json(&s.project.run(&run)?))).await
}

async fn run_matches(State(s): State<Shared>, Path(run): Path<String>) -> ApiResult<Response> {
    blocking(&s, move |s| Ok(ok_json(&s.project.run_matches(&run)?))).await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    trs_set: Option<String>,
    backend: Option<String>,
    threshold: Option<f64>,
    #[serde(default)]
    pass_index: u32,
}

/// Runs detection to completion and answers with the finished run.
async fn start_run(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    check_auth(&s, &headers)?;
    let b: RunBody = if body.is_empty() { RunBody::default() } else { parse_body(&body)? };
    blocking(&s, move |s| {
        let mut req = s.project.default_detect_request(b.trs_set.as_deref())?;
        if let Some(x) = b.backend {
            req.backend = x;
        }
        if let Some(t) = b.threshold {
            req.threshold = t;
        }
        req.pass_index = b.pass_index;
        let out = s.project.detect(&req)?;
        Ok((StatusCode::CREATED, Json(serde_json::to_value(&out.run).unwrap_or(Value::Null))).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
struct QueueQuery {
    annotator: Option<String>,
    run: Option<String>,
    limit: Option<usize>,
}

fn annotator_of(q: &QueueQuery) -> ApiResult<String> {
    match q.annotator.as_deref() {
        Some(a) if !a.trim().is_empty() => Ok(a.to_string()),
        _ => Err(ApiError::bad_request("query parameter `annotator` is required")),
    }
}

async fn match_queue(State(s): State<Shared>, Query(q): Query<QueueQuery>) -> ApiResult<Response> {
    let annotator = annotator_of(&q)?;
    blocking(&s, move |s| {
        let p = &s.project;
        let run = p.resolve_run(q.run.as_deref())?;
        let set = p.load_set(&run.trs_set)?;
        let best = p.run_best_matches(&run.run_id)?;
        let index = p.annotation_index()?;
        let cfg = p.config().annotation.clone();
        let now = p.now();
        let mut leases = s.leases.lock().expect("lease table poisoned");
        leases.purge_expired(now);
        let page = match_tasks(
            &run.run_id,
            &best,
            &set,
            &index,
            cfg.top_k,
            &QueueParams {
                annotator: &annotator,
                per_item: cfg.annotators_per_item,
                limit: q.limit.unwrap_or(20),
                now,
                leases: Some(&leases),
            },
        );
        for t in &page.tasks {
            leases.lease(&t.task_id, &annotator, now, cfg.lease_seconds);
        }
        Ok(ok_json(&page))
    })
    .await
}

async fn bundle_queue(State(s): State<Shared>, Query(q): Query<QueueQuery>) -> ApiResult<Response> {
    let annotator = annotator_of(&q)?;
    blocking(&s, move |s| {
        let p = &s.project;
        let run = p.resolve_run(q.run.as_deref())?;
        let matches = p.run_matches(&run.run_id)?;
        let existing = p.bundle_annotations()?;
        let cfg = p.config().annotation.clone();
        let now = p.now();
        let mut leases = s.leases.lock().expect("lease table poisoned");
        leases.purge_expired(now);
        let page = bundle_tasks(
            &matches,
            p.taxonomy(),
            p.config().utilization.k_per_facet,
            &existing,
            &QueueParams {
                annotator: &annotator,
                per_item: cfg.annotators_per_item,
                limit: q.limit.unwrap_or(20),
                now,
                leases: Some(&leases),
            },
        );
        for t in &page.tasks {
            leases.lease(&t.task_id, &annotator, now, cfg.lease_seconds);
        }
        Ok(ok_json(&page))
    })
    .await
}

async fn list_match_annotations(State(s): State<Shared>) -> ApiResult<Response> {
    blocking(&s, |s| Ok(ok_json(&s.project.match_annotations()?))).await
}

async fn list_bundle_annotations(State(s): State<Shared>) -> ApiResult<Response> {
    blocking(&s, |s| Ok(ok_json(&s.project.bundle_annotations()?))).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchAnnotationBody {
    annotator_id: String,
    run_id: String,
    sentence_id: String,
    category: u8,
    #[serde(default)]
    corrected_facet: Option<String>,
    #[serde(default)]
    corrected_key: Option<Key>,
}

async fn add_match_annotation(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    check_auth(&s, &headers)?;
    let b: MatchAnnotationBody = parse_body(&body)?;
    blocking(&s, move |s| {
        let a = MatchAnnotation {
            annotator_id: b.annotator_id,
            run_id: b.run_id,
            sentence_id: b.sentence_id,
            category: b.category,
            corrected_facet: b.corrected_facet,
            corrected_key: b.corrected_key,
            created_at: s.project.now(),
        };
        s.project.add_match_annotation(&a)?;
        s.leases
            .lock()
            .expect("lease table poisoned")
            .release(&match_task_id(&a.run_id, &a.sentence_id));
        Ok((StatusCode::CREATED, Json(serde_json::to_value(&a).unwrap_or(Value::Null))).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleAnnotationBody {
    annotator_id: String,
    target_id: String,
    domain: String,
    label: BundleLabel,
}

async fn add_bundle_annotation(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    check_auth(&s, &headers)?;
    let b: BundleAnnotationBody = parse_body(&body)?;
    blocking(&s, move |s| {
        let a = BundleAnnotation {
            annotator_id: b.annotator_id,
            target_id: b.target_id,
            domain: b.domain,
            label: b.label,
            created_at: s.project.now(),
        };
        let a = s.project.add_bundle_annotation(&a)?;
        s.leases
            .lock()
            .expect("lease table poisoned")
            .release(&bundle_task_id(&a.target_id, &a.domain));
        Ok((StatusCode::CREATED, Json(serde_json::to_value(&a).unwrap_or(Value::Null))).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
struct PromotionQuery {
    run: Option<String>,
    mode: Option<PromotionMode>,
}

async fn list_promotions(State(s): State<Shared>, Query(q): Query<PromotionQuery>) -> ApiResult<Response> {
    blocking(&s, move |s| {
        let run = s.project.resolve_run(q.run.as_deref())?;
        let mode = q.mode.unwrap_or(PromotionMode::Annotated);
        Ok(ok_json(&s.project.promotion_candidates(&run.run_id, mode)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApproveBody {
    run: String,
    #[serde(default = "annotated")]
    mode: PromotionMode,
    ids: Vec<String>,
}

fn annotated() -> PromotionMode {
    PromotionMode::Annotated
}

async fn approve_promotions(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    check_auth(&s, &headers)?;
    let b: ApproveBody = parse_body(&body)?;
    blocking(&s, move |s| {
        let _lock = s.project.lock("promotions")?;
        let meta = s.project.approve_promotions(&b.run, b.mode, &b.ids)?;
        Ok((StatusCode::CREATED, Json(serde_json::to_value(&meta).unwrap_or(Value::Null))).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoopBody {
    #[serde(default = "auto")]
    mode: PromotionMode,
    promote_threshold: Option<f64>,
    max_passes: Option<u32>,
    allowed_categories: Option<Vec<u8>>,
    from_run: Option<String>,
}

fn auto() -> PromotionMode {
    PromotionMode::AutoThreshold
}

/// Starts the loop in the background. Answers 202 once the running state is
/// on disk, or 409 while another detection or loop holds the project.
async fn start_loop(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    check_auth(&s, &headers)?;
    let b: LoopBody = if body.is_empty() {
        parse_body(&Bytes::from_static(b"{}"))?
    } else {
        parse_body(&body)?
    };
    let (ticket, policy) = blocking(&s, move |s| {
        let p = &s.project;
        let mut policy = p.config().feedback_policy(b.mode);
        if let Some(t) = b.promote_threshold {
            policy.promote_threshold = t;
        }
        if let Some(n) = b.max_passes {
            policy.max_passes = n;
        }
        if let Some(c) = b.allowed_categories {
            policy.allowed_categories = c.into_iter().collect();
        }
        let threshold = match &b.from_run {
            Some(r) => p.run(r)?.threshold,
            None => p.config().detection.threshold,
        };
        policy.validate(threshold)?;
        let ticket = p.begin_loop(p.lock("loop")?)?;
        Ok((ticket, (policy, b.from_run)))
    })
    .await?;
    let status = ticket.status();
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let (policy, from_run) = policy;
        if let Err(e) = state.project.execute_loop(ticket, &policy, from_run.as_deref()) {
            log::warn!("loop failed: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::to_value(&status).unwrap_or(Value::Null))).into_response())
}

async fn loop_status(State(s): State<Shared>) -> ApiResult<Response> {
    blocking(&s, |s| Ok(ok_json(&s.project.loop_status()?))).await
}

#[derive(Debug, Deserialize)]
struct RunQuery {
    run: Option<String>,
}

async fn target_scores(State(s): State<Shared>, Path(target): Path<String>, Query(q): Query<RunQuery>) -> ApiResult<Response> {
    blocking(&s, move |s| {
        let run = s.project.resolve_run(q.run.as_deref())?;
        let sheet = s
            .project
            .sheets(&run.run_id)?
            .into_iter()
            .find(|sh| sh.target_id == target)
            .ok_or_else(|| Error::NotFound(format!("no matches for target {target} in {}", run.run_id)))?;
        Ok(ok_json(&sheet))
    })
    .await
}

fn csv_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

fn respond<T: Serialize>(csv: bool, value: &T, to_csv: impl FnOnce(&T) -> simpa_core::Result<String>) -> ApiResult<Response> {
    if csv {
        Ok(csv_response(to_csv(value)?))
    } else {
        Ok(ok_json(value))
    }
}

/// CSV form of a loop report: one row per pass.
pub fn loop_csv(report: &LoopReport) -> simpa_core::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "pass_index",
        "run_id",
        "trs_set",
        "matches",
        "new_matches",
        "promotions",
        "skipped_unannotated",
        "duplicates",
    ])?;
    for p in &report.passes {
        w.write_record([
            p.pass_index.to_string(),
            p.run_id.clone(),
            p.trs_set.clone(),
            p.matches.to_string(),
            p.new_matches.to_string(),
            p.promotions.to_string(),
            p.skipped_unannotated.to_string(),
            p.duplicates.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn param<'a>(q: &'a HashMap<String, String>, key: &str) -> Option<&'a str> {
    q.get(key).map(String::as_str).filter(|v| !v.is_empty())
}

fn parse_param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    param(q, key)
        .map(|v| v.parse::<T>().map_err(|_| ApiError::bad_request(format!("bad value for `{key}`: {v:?}"))))
        .transpose()
}

fn source_param(q: &HashMap<String, String>) -> ApiResult<Source> {
    match param(q, "source").unwrap_or("match") {
        "match" => Ok(Source::Match),
        "bundle" => Ok(Source::Bundle),
        other => Err(ApiError::bad_request(format!("unknown source {other:?}"))),
    }
}

async fn report(
    State(s): State<Shared>,
    Path(kind): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let csv = match param(&q, "format").unwrap_or("json") {
        "json" => false,
        "csv" => true,
        other => return Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    };
    blocking(&s, move |s| {
        let p = &s.project;
        match kind.as_str() {
            "availability" => respond(csv, &p.availability()?, |v| v.to_csv()),
            "percentiles" => {
                let run = p.resolve_run(param(&q, "run"))?;
                let domain = param(&q, "domain").ok_or_else(|| ApiError::bad_request("query parameter `domain` is required"))?;
                let min_tis = parse_param(&q, "min_tis")?.unwrap_or(p.config().utilization.min_tis);
                respond(csv, &p.percentiles(&run.run_id, domain, min_tis)?, |v| v.to_csv())
            }
            "quality" => {
                let run = p.resolve_run(param(&q, "run"))?;
                let k = parse_param(&q, "k")?.unwrap_or(10);
                if k == 0 {
                    return Err(ApiError::bad_request("k must be >= 1"));
                }
                let dk = parse_param(&q, "distribution_k")?.unwrap_or(p.config().annotation.top_k);
                respond(csv, &metrics::quality_report(p, &run.run_id, k, dk)?, |v| v.to_csv())
            }
            "pairwise" => {
                let m = metrics::project_matrix(p, source_param(&q)?)?;
                respond(csv, &metrics::pairwise_report(&m), |v| v.to_csv())
            }
            "alpha" => {
                let source = source_param(&q)?;
                let metric = match param(&q, "metric") {
                    None => source.default_metric(),
                    Some("ordinal") => AlphaMetric::Ordinal,
                    Some("nominal") => AlphaMetric::Nominal,
                    Some(other) => return Err(ApiError::bad_request(format!("unknown metric {other:?}"))),
                };
                let report = metrics::alpha_report(&metrics::project_matrix(p, source)?, metric);
                respond(csv, &report, |r| {
                    Ok(format!(
                        "metric,items,annotators,alpha\n{},{},{},{}\n",
                        serde_json::to_value(r.metric)?.as_str().unwrap_or_default(),
                        r.items,
                        r.annotators,
                        r.alpha.map(|a| a.to_string()).unwrap_or_default()
                    ))
                })
            }
            "loop" => {
                let report = match param(&q, "loop") {
                    Some(id) => p.loop_report(id)?,
                    None => p
                        .loop_status()?
                        .report
                        .ok_or_else(|| Error::NotFound("no finished loop".into()))?,
                };
                respond(csv, &report, loop_csv)
            }
            other => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown report {other:?}"))),
        }
    })
    .await
}
