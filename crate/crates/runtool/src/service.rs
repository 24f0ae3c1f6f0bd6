//! HTTP labeling service: human (or oracle-replay) sessions that drive one
//! imitation round each.
//!
//! A session serves batches proposed by the imitation loop, stores labels
//! per sample id and commits a batch to the run's buffer once every sample
//! in it is labeled. `complete` trains the round's model on a blocking
//! worker; `GET /api/sessions/{id}` reports `training` until it finishes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex as SyncMutex};
use std::time::Instant;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use censorlab::reward::{Annotation, Annotator, ImitationLoop, Source};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

use crate::lab::Lab;
use crate::pipeline::{self, RoundRow};
use crate::record::{HumanTime, Job, RunDir};

pub struct AppState {
    runs_root: PathBuf,
    sessions: SyncMutex<HashMap<String, Arc<Session>>>,
    /// Run id → its open session.
    open_runs: SyncMutex<HashMap<String, String>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(runs_root: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            runs_root: runs_root.into(),
            sessions: SyncMutex::new(HashMap::new()),
            open_runs: SyncMutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }

    fn run_dir(&self, run_id: &str) -> Result<PathBuf, ApiError> {
        let plain = !run_id.is_empty() && !run_id.contains(['/', '\\']) && run_id != "." && run_id != "..";
        let path = self.runs_root.join(run_id);
        if !plain || !path.join(crate::record::CONFIG).exists() {
            return Err(ApiError::not_found(format!("unknown run {run_id:?}")));
        }
        Ok(path)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(session_status))
        .route("/api/sessions/{id}/batch", get(batch))
        .route("/api/sessions/{id}/labels", post(labels))
        .route("/api/sessions/{id}/complete", post(complete))
        .route("/api/runs", get(runs))
        .route("/api/runs/{id}/metrics", get(run_metrics))
        .with_state(state)
}

pub async fn serve(addr: &str, runs_root: &Path) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("serving {} on http://{}", runs_root.display(), listener.local_addr()?);
    axum::serve(listener, router(AppState::new(runs_root))).await
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": error.into() }),
        }
    }

    fn not_found(msg: String) -> Self {
        Self::new(StatusCode::NOT_FOUND, msg)
    }

    fn conflict(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, msg)
    }

    fn unprocessable(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }
}

impl From<crate::Error> for ApiError {
    fn from(e: crate::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<censorlab::Error> for ApiError {
    fn from(e: censorlab::Error) -> Self {
        crate::Error::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ---------------------------------------------------------------------------
// Sessions

pub struct Session {
    id: String,
    run_id: String,
    round: usize,
    oracle_replay: bool,
    state: Mutex<SessionState>,
    status: SyncMutex<Status>,
    progress: SyncMutex<Progress>,
}

struct Work {
    dir: RunDir,
    lab: Lab,
    lp: ImitationLoop,
}

struct SessionState {
    /// Absent while the round trains.
    work: Option<Work>,
    batch: Option<OpenBatch>,
    batches_served: usize,
    committed: HashMap<String, u8>,
}

struct OpenBatch {
    index: usize,
    ids: Vec<String>,
    points: Vec<Vec<f64>>,
    labels: HashMap<String, (u8, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum Status {
    Labeling,
    Training,
    Completed { metrics: RoundRow },
    Failed { error: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quota {
    pub malign: usize,
    pub benign: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Progress {
    kept_malign: usize,
    kept_benign: usize,
    presented: usize,
    quota: Quota,
    can_complete: bool,
    human_time: HumanTime,
}

impl Progress {
    fn of(work: &Work) -> Self {
        let (kept_malign, kept_benign) = work.lp.kept_this_round();
        let cfg = work.lp.config();
        Self {
            kept_malign,
            kept_benign,
            presented: work.lp.presented_this_round(),
            quota: Quota {
                malign: cfg.malign_quota,
                benign: cfg.benign_quota,
            },
            can_complete: work.lp.can_finish(),
            human_time: work.dir.ledger.human_time,
        }
    }
}

impl Session {
    fn status(&self) -> Status {
        self.status.lock().expect("status").clone()
    }

    fn set_status(&self, s: Status) {
        *self.status.lock().expect("status") = s;
    }

    fn refresh(&self, work: &Work) {
        *self.progress.lock().expect("progress") = Progress::of(work);
    }

    fn progress(&self) -> Progress {
        *self.progress.lock().expect("progress")
    }

    fn require_labeling(&self) -> ApiResult<()> {
        match self.status() {
            Status::Labeling => Ok(()),
            Status::Training => Err(ApiError::conflict("round is training")),
            Status::Completed { .. } => Err(ApiError::conflict("round already completed")),
            Status::Failed { error } => Err(ApiError::conflict(format!("round failed: {error}"))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub run_id: String,
    pub round: usize,
    /// Label every batch with the world's oracle as it is served.
    #[serde(default)]
    pub oracle_replay: bool,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let path = app.run_dir(&req.run_id)?;
    if let Some(open) = app.open_runs.lock().expect("open runs").get(&req.run_id) {
        return Err(ApiError::conflict("run already has an open session").with("session_id", json!(open)));
    }
    // rebuilding the loop retrains finished rounds
    let work = tokio::task::spawn_blocking(move || -> crate::Result<Work> {
        let dir = RunDir::open(&path)?;
        let lab = Lab::new(dir.config.clone())?;
        let lp = pipeline::resume_imitation(&dir, &lab)?;
        Ok(Work { dir, lab, lp })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;

    if work.lp.is_finished() {
        return Err(ApiError::conflict("all imitation rounds are complete"));
    }
    let expected = work.lp.current_round();
    if req.round != expected {
        return Err(ApiError::conflict(format!("round {} is not open", req.round)).with("open_round", json!(expected)));
    }
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
    {
        let mut open = app.open_runs.lock().expect("open runs");
        if let Some(other) = open.get(&req.run_id) {
            return Err(ApiError::conflict("run already has an open session").with("session_id", json!(other)));
        }
        open.insert(req.run_id.clone(), id.clone());
    }
    let batches_served = work.lp.batches_this_round();
    let progress = Progress::of(&work);
    let session = Arc::new(Session {
        id: id.clone(),
        run_id: req.run_id.clone(),
        round: req.round,
        oracle_replay: req.oracle_replay,
        state: Mutex::new(SessionState {
            work: Some(work),
            batch: None,
            batches_served,
            committed: HashMap::new(),
        }),
        status: SyncMutex::new(Status::Labeling),
        progress: SyncMutex::new(progress),
    });
    app.sessions.lock().expect("session map").insert(id.clone(), session);
    info!("session {id} opened on run {} round {}", req.run_id, req.round);
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "session_id": id,
            "run_id": req.run_id,
            "round": req.round,
            "quota": progress.quota,
            "oracle_replay": req.oracle_replay,
        })),
    ))
}

async fn session_status(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = app.session(&id)?;
    let mut body = serde_json::to_value(s.status()).expect("status serializes");
    body["session_id"] = json!(s.id);
    body["run_id"] = json!(s.run_id);
    body["round"] = json!(s.round);
    body["progress"] = serde_json::to_value(s.progress()).expect("progress serializes");
    Ok(Json(body))
}

#[derive(Debug, Serialize)]
struct BatchItem {
    id: String,
    x: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

#[derive(Debug, Serialize)]
struct WorldComponent {
    mean: Vec<f64>,
    sigma: f64,
    weight: f64,
}

fn world_context(lab: &Lab) -> Vec<WorldComponent> {
    lab.world
        .components()
        .iter()
        .map(|c| WorldComponent {
            mean: c.mean.clone(),
            sigma: c.max_std(),
            weight: c.weight,
        })
        .collect()
}

/// Commits the open batch to the loop and the run's buffer.
fn commit(state: &mut SessionState, source: Source) -> crate::Result<()> {
    let batch = state.batch.take().expect("open batch");
    let work = state.work.as_mut().expect("work present while labeling");
    let labels: Vec<Annotation> = batch
        .ids
        .iter()
        .map(|id| {
            let (y, ms) = batch.labels[id];
            Annotation {
                y,
                elapsed_seconds: ms / 1000.0,
            }
        })
        .collect();
    work.lp.record(&batch.points, &labels, source)?;
    work.dir.write_feedback(crate::record::BUFFER, work.lp.buffer())?;
    for id in batch.ids {
        let y = batch.labels[&id].0;
        state.committed.insert(id, y);
    }
    Ok(())
}

async fn batch(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = app.session(&id)?;
    let mut state = s.state.lock().await;
    s.require_labeling()?;
    let state = &mut *state;
    let work = state.work.as_ref().expect("work present while labeling");
    let world = world_context(&work.lab);
    let mut committed = false;
    if state.batch.is_none() && !work.lp.can_finish() {
        let points = work.lp.propose(work.lab.generator())?;
        let index = state.batches_served;
        state.batches_served += 1;
        let ids: Vec<String> = (0..points.len()).map(|i| format!("r{}b{index}i{i}", s.round)).collect();
        let mut open = OpenBatch {
            index,
            ids,
            points,
            labels: HashMap::new(),
        };
        if s.oracle_replay {
            let labels = work.lab.oracle().label(&open.points)?;
            for (id, a) in open.ids.iter().zip(labels) {
                open.labels.insert(id.clone(), (a.y, a.elapsed_seconds * 1000.0));
            }
            state.batch = Some(open);
            // replayed labels carry the oracle's zero elapsed time
            let batch = state.batch.as_ref().expect("just set");
            let items: Vec<BatchItem> = batch
                .ids
                .iter()
                .zip(&batch.points)
                .map(|(id, x)| BatchItem {
                    id: id.clone(),
                    x: x.clone(),
                    label: Some(batch.labels[id].0),
                })
                .collect();
            let index = batch.index;
            commit(state, Source::Oracle)?;
            committed = true;
            s.refresh(state.work.as_ref().expect("work"));
            return Ok(Json(batch_body(&s, index, items, committed, world)));
        }
        state.batch = Some(open);
    }
    let Some(batch) = state.batch.as_ref() else {
        // quota met or presented cap reached: nothing left to label
        return Ok(Json(batch_body(&s, state.batches_served, Vec::new(), false, world)));
    };
    let items = batch
        .ids
        .iter()
        .zip(&batch.points)
        .map(|(id, x)| BatchItem {
            id: id.clone(),
            x: x.clone(),
            label: batch.labels.get(id).map(|l| l.0),
        })
        .collect();
    Ok(Json(batch_body(&s, batch.index, items, committed, world)))
}

fn batch_body(s: &Session, index: usize, items: Vec<BatchItem>, committed: bool, world: Vec<WorldComponent>) -> Value {
    json!({
        "session_id": s.id,
        "round": s.round,
        "batch": index,
        "samples": items,
        "committed": committed,
        "progress": s.progress(),
        "world": { "components": world },
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPost {
    /// Sample id → 0 (malign) or 1 (benign).
    pub labels: BTreeMap<String, u8>,
    /// Sample id → milliseconds spent on it.
    #[serde(default)]
    pub elapsed_ms: BTreeMap<String, f64>,
}

async fn labels(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(post): Json<LabelPost>,
) -> ApiResult<Json<Value>> {
    let s = app.session(&id)?;
    let mut guard = s.state.lock().await;
    s.require_labeling()?;
    let state = &mut *guard;

    let open_ids = |state: &SessionState, sid: &str| state.batch.as_ref().is_some_and(|b| b.ids.iter().any(|i| i == sid));
    let unknown: Vec<&String> = post
        .labels
        .keys()
        .chain(post.elapsed_ms.keys())
        .filter(|sid| !open_ids(state, sid) && !state.committed.contains_key(*sid))
        .collect();
    if !unknown.is_empty() {
        return Err(ApiError::unprocessable("unknown sample id").with("ids", json!(unknown)));
    }
    if let Some((sid, y)) = post.labels.iter().find(|(_, y)| **y > 1) {
        return Err(ApiError::unprocessable(format!("label {y} for {sid} is not 0 or 1")));
    }
    if let Some((sid, ms)) = post.elapsed_ms.iter().find(|(_, ms)| !(ms.is_finite() && **ms >= 0.0)) {
        return Err(ApiError::unprocessable(format!("elapsed_ms {ms} for {sid} is not a duration")));
    }
    if let Some(sid) = post.elapsed_ms.keys().find(|sid| !post.labels.contains_key(*sid)) {
        return Err(ApiError::unprocessable(format!("elapsed_ms for {sid} without a label")));
    }
    let changed: Vec<&String> = post
        .labels
        .iter()
        .filter(|(sid, y)| state.committed.get(*sid).is_some_and(|c| c != *y))
        .map(|(sid, _)| sid)
        .collect();
    if !changed.is_empty() {
        return Err(ApiError::conflict("labels already committed").with("ids", json!(changed)));
    }

    let mut stored = 0;
    if let Some(batch) = state.batch.as_mut() {
        for (sid, &y) in &post.labels {
            if batch.ids.contains(sid) {
                let ms = post
                    .elapsed_ms
                    .get(sid)
                    .copied()
                    .or_else(|| batch.labels.get(sid).map(|l| l.1))
                    .unwrap_or(0.0);
                batch.labels.insert(sid.clone(), (y, ms));
                stored += 1;
            }
        }
    }
    let complete = state.batch.as_ref().is_some_and(|b| b.labels.len() == b.ids.len());
    if complete {
        commit(state, Source::Human)?;
        s.refresh(state.work.as_ref().expect("work"));
    }
    Ok(Json(json!({
        "stored": stored,
        "committed": complete,
        "progress": s.progress(),
    })))
}

async fn complete(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = app.session(&id)?;
    let mut guard = s.state.lock().await;
    s.require_labeling()?;
    let work = guard.work.as_ref().expect("work present while labeling");
    if !work.lp.can_finish() {
        let (m, b) = work.lp.remaining_quota();
        return Err(ApiError::conflict("quota unmet").with("remaining", json!({ "malign": m, "benign": b })));
    }
    if guard.batch.as_ref().is_some_and(|b| !b.labels.is_empty()) {
        warn!("session {id}: discarding a partly labeled batch at completion");
    }
    guard.batch = None;
    let mut work = guard.work.take().expect("work present");
    s.set_status(Status::Training);
    drop(guard);

    let start = Instant::now();
    let (work, outcome) = tokio::task::spawn_blocking(move || {
        let outcome = (|| -> crate::Result<RoundRow> {
            work.lp.finish_round(&work.lab.grid)?;
            let row = pipeline::save_round(&mut work.dir, &work.lab, &work.lp)?;
            let rounds = work.dir.ledger.imitation_rounds;
            work.dir.push_job(Job::Imitate { rounds }, start.elapsed().as_secs_f64())?;
            Ok(row)
        })();
        (work, outcome)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;

    let mut guard = s.state.lock().await;
    s.refresh(&work);
    guard.work = Some(work);
    app.open_runs.lock().expect("open runs").remove(&s.run_id);
    match outcome {
        Ok(row) => {
            s.set_status(Status::Completed { metrics: row.clone() });
            Ok(Json(json!({
                "session_id": s.id,
                "round": s.round,
                "status": "completed",
                "metrics": row,
            })))
        }
        Err(e) => {
            s.set_status(Status::Failed { error: e.to_string() });
            Err(e.into())
        }
    }
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Serialize)]
struct RunSummary {
    run_id: String,
    name: String,
    world: Option<String>,
    rounds: usize,
    rounds_finished: usize,
    human_time: HumanTime,
    metrics: Vec<String>,
}

async fn runs(State(app): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let root = app.runs_root.clone();
    let list = tokio::task::spawn_blocking(move || -> crate::Result<Vec<RunSummary>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let entry = entry?;
            if !entry.path().join(crate::record::CONFIG).exists() {
                continue;
            }
            let run_id = entry.file_name().to_string_lossy().into_owned();
            match RunDir::open(&entry.path()) {
                Ok(dir) => out.push(RunSummary {
                    run_id,
                    name: dir.config.name.clone(),
                    world: dir.config.world.preset.clone(),
                    rounds: dir.config.feedback.rounds,
                    rounds_finished: dir.ledger.imitation_rounds,
                    human_time: dir.ledger.human_time,
                    metrics: dir.artifacts_under("metrics/").map(String::from).collect(),
                }),
                Err(e) => warn!("skipping {run_id}: {e}"),
            }
        }
        out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(out)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "runs": list })))
}

/// A CSV cell as JSON: integers and floats as numbers, empty as null.
fn cell(s: &str) -> Value {
    if s.is_empty() {
        Value::Null
    } else if let Ok(i) = s.parse::<i64>() {
        json!(i)
    } else if let Ok(f) = s.parse::<f64>() {
        serde_json::Number::from_f64(f).map(Value::Number).unwrap_or_else(|| json!(s))
    } else {
        json!(s)
    }
}

/// Parses a CSV into one JSON object per row.
pub fn csv_rows(bytes: &[u8]) -> crate::Result<Vec<Value>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(Value::Object(
                headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), cell(v))).collect(),
            ))
        })
        .collect()
}

async fn run_metrics(State(app): State<Arc<AppState>>, UrlPath(run_id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let path = app.run_dir(&run_id)?;
    let metrics = tokio::task::spawn_blocking(move || -> crate::Result<serde_json::Map<String, Value>> {
        let dir = RunDir::open(&path)?;
        let mut out = serde_json::Map::new();
        for rel in dir.artifacts_under("metrics/").filter(|r| r.ends_with(".csv")) {
            let name = rel.trim_start_matches("metrics/").trim_end_matches(".csv").to_string();
            out.insert(name, Value::Array(csv_rows(&dir.read(rel)?)?));
        }
        Ok(out)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "run_id": run_id, "metrics": metrics })))
}
