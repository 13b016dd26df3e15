//! HTTP JSON service over exploration sessions.
//!
//! Each session has a writer lock that serializes its mutations in arrival
//! order, and an immutable snapshot that read endpoints clone without waiting
//! for a running step. Steps run on the blocking pool against a copy of the
//! snapshot, which is swapped in only on success.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dualview_core::dataset::MatrixFormat;
use dualview_core::error::Error as CoreError;
use dualview_core::explorer::{Artifact, Session, SessionFile, Step};
use dualview_core::svd::IndexSet;
use serde::{Deserialize, Serialize};

use crate::api::{parse_json, ApiError, Envelope};
use crate::script::SessionInputs;
use crate::GatewayError;

/// Large expression matrices arrive inline as text.
const BODY_LIMIT: usize = 1 << 30;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StepStatus {
    /// Mutations waiting for or holding the writer lock.
    pub pending: usize,
    /// Kind of the step currently running, if any.
    pub running: Option<String>,
    pub completed: usize,
    pub last_error: Option<ApiError>,
}

struct Entry {
    writer: tokio::sync::Mutex<()>,
    snapshot: RwLock<Arc<Session>>,
    status: Mutex<StepStatus>,
}

impl Entry {
    fn new(session: Session) -> Self {
        Entry {
            writer: tokio::sync::Mutex::new(()),
            snapshot: RwLock::new(Arc::new(session)),
            status: Mutex::new(StepStatus::default()),
        }
    }

    fn snapshot(&self) -> Arc<Session> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

struct Inner {
    sessions: RwLock<HashMap<String, Arc<Entry>>>,
    next_id: AtomicU64,
    data_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(data_dir: Option<PathBuf>) -> Self {
        AppState(Arc::new(Inner {
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            data_dir,
        }))
    }

    /// Load every `session-<n>.json` file found in the data directory.
    pub fn load_saved(&self) -> Result<usize, GatewayError> {
        let Some(dir) = &self.0.data_dir else { return Ok(0) };
        fs::create_dir_all(dir).map_err(|source| GatewayError::Io {
            path: dir.clone(),
            source,
        })?;
        let entries = fs::read_dir(dir).map_err(|source| GatewayError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut loaded = 0;
        for entry in entries.flatten() {
            let path = entry.path();
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else { continue };
            let Some(n) = id.strip_prefix("session-").and_then(|n| n.parse::<u64>().ok()) else { continue };
            match fs::read_to_string(&path).map_err(CoreError::from_io).and_then(|t| Session::import_json(&t)) {
                Ok(session) => {
                    self.0.next_id.fetch_max(n + 1, Ordering::SeqCst);
                    self.insert(id, session);
                    loaded += 1;
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(loaded)
    }

    fn insert(&self, id: String, session: Session) {
        self.0
            .sessions
            .write()
            .expect("session table lock")
            .insert(id, Arc::new(Entry::new(session)));
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, Response> {
        self.0
            .sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| {
                fail(
                    StatusCode::NOT_FOUND,
                    ApiError::new("unknown_session", format!("no session `{id}`")).at(id.to_string()),
                )
            })
    }

    fn persist(&self, id: &str, session: &Session) {
        let Some(dir) = &self.0.data_dir else { return };
        let path = dir.join(format!("{id}.json"));
        let result = session
            .export_json()
            .map_err(|e| e.to_string())
            .and_then(|text| fs::write(&path, text).map_err(|e| e.to_string()));
        if let Err(e) = result {
            log::error!("could not save {}: {e}", path.display());
        }
    }
}

trait FromIo {
    fn from_io(e: std::io::Error) -> Self;
}

impl FromIo for CoreError {
    fn from_io(e: std::io::Error) -> Self {
        CoreError::Session(e.to_string())
    }
}

fn reply<T: Serialize>(status: StatusCode, payload: T) -> Response {
    (status, Json(Envelope::ok(payload))).into_response()
}

fn fail(status: StatusCode, error: ApiError) -> Response {
    (status, Json(Envelope::<()>::Error { error })).into_response()
}

fn bad_request(error: ApiError) -> Response {
    fail(StatusCode::BAD_REQUEST, error)
}

fn domain(e: &CoreError) -> Response {
    fail(StatusCode::UNPROCESSABLE_ENTITY, ApiError::from(e))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/steps", post(post_step))
        .route("/sessions/{id}/undo", post(post_undo))
        .route("/sessions/{id}/biplot", get(get_biplot))
        .route("/sessions/{id}/tests", get(get_tests))
        .route("/sessions/{id}/export", get(get_export))
        .route("/sessions/{id}/status", get(get_status))
        .fallback(|| async { fail(StatusCode::NOT_FOUND, ApiError::new("not_found", "no such endpoint")) })
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(config: ServeConfig) -> Result<(), GatewayError> {
    let state = AppState::new(config.data_dir.clone());
    let loaded = state.load_saved()?;
    if loaded > 0 {
        log::info!("restored {loaded} sessions");
    }
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| GatewayError::Io {
            path: PathBuf::from(&addr),
            source,
        })?;
    log::info!("listening on {addr}");
    eprintln!("dualview listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| GatewayError::Io {
            path: PathBuf::from(addr),
            source,
        })
}

/// Body of `POST /sessions`: inline inputs, or a previously exported session.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Delimited matrix text.
    #[serde(default)]
    pub matrix: Option<String>,
    #[serde(default)]
    pub format: MatrixFormat,
    #[serde(default)]
    pub sample_annotations: Option<String>,
    #[serde(default)]
    pub variable_annotations: Option<String>,
    #[serde(default)]
    pub import: Option<SessionFile>,
    /// Steps applied right after creation.
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Serialize)]
struct Created<'a> {
    id: String,
    session: dualview_core::explorer::SessionSummary<'a>,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Response {
    let request: CreateSession = match parse_json(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(e),
    };
    let built = tokio::task::spawn_blocking(move || -> Result<Session, Response> {
        let inputs = request.matrix.map(|matrix| SessionInputs {
            matrix,
            format: request.format,
            sample_annotations: request.sample_annotations,
            variable_annotations: request.variable_annotations,
        });
        let mut session = match (inputs, request.import) {
            (Some(_), Some(_)) => {
                return Err(bad_request(
                    ApiError::new("malformed_request", "give either `matrix` or `import`, not both").at("/import"),
                ))
            }
            (None, Some(file)) => Session::import(file).map_err(|e| bad_request(ApiError::from(&e).at("/import")))?,
            (Some(inputs), None) => inputs.session().map_err(|e| {
                let mut error = e.api_error();
                error.location = Some(format!("/matrix{}", error.location.map(|l| format!(" {l}")).unwrap_or_default()));
                bad_request(error)
            })?,
            (None, None) => {
                return Err(bad_request(
                    ApiError::new("malformed_request", "missing `matrix` or `import`").at("/matrix"),
                ))
            }
        };
        crate::script::apply_all(&mut session, &request.steps)
            .map_err(|e| fail(StatusCode::UNPROCESSABLE_ENTITY, e.api_error()))?;
        Ok(session)
    })
    .await
    .expect("session construction panicked");
    let session = match built {
        Ok(s) => s,
        Err(response) => return response,
    };
    let id = format!("session-{}", state.0.next_id.fetch_add(1, Ordering::SeqCst));
    state.persist(&id, &session);
    let response = reply(
        StatusCode::CREATED,
        Created {
            id: id.clone(),
            session: session.summary(),
        },
    );
    state.insert(id, session);
    response
}

async fn list_sessions(State(state): State<AppState>) -> Response {
    let sessions = state.0.sessions.read().expect("session table lock");
    let ids: BTreeMap<&String, usize> = sessions.iter().map(|(id, e)| (id, e.snapshot().steps().len())).collect();
    reply(StatusCode::OK, ids)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.entry(&id) {
        Ok(entry) => reply(StatusCode::OK, entry.snapshot().summary()),
        Err(r) => r,
    }
}

#[derive(Debug, Serialize)]
struct Applied<'a> {
    index: usize,
    kind: &'static str,
    artifact: Option<&'a Artifact>,
    session: dualview_core::explorer::SessionSummary<'a>,
}

#[derive(Debug, Serialize)]
struct Undone<'a> {
    undone: Step,
    session: dualview_core::explorer::SessionSummary<'a>,
}

enum Mutation {
    Apply(Step),
    Undo,
}

/// Run one mutation under the session's writer lock; the snapshot changes
/// only if the mutation succeeds.
async fn mutate(state: &AppState, id: &str, mutation: Mutation) -> Response {
    let entry = match state.entry(id) {
        Ok(e) => e,
        Err(r) => return r,
    };
    entry.status.lock().expect("status lock").pending += 1;
    let _writer = entry.writer.lock().await;
    let kind = match &mutation {
        Mutation::Apply(step) => step.kind(),
        Mutation::Undo => "undo",
    };
    entry.status.lock().expect("status lock").running = Some(kind.to_string());
    let mut session = (*entry.snapshot()).clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let result = match mutation {
            Mutation::Apply(step) => session.apply(step).map(|_| None),
            Mutation::Undo => session.undo().map(Some),
        };
        (session, result)
    })
    .await
    .expect("step computation panicked");
    let (session, result) = outcome;
    let response = match result {
        Ok(undone) => {
            let session = Arc::new(session);
            state.persist(id, &session);
            *entry.snapshot.write().expect("snapshot lock") = session.clone();
            let mut status = entry.status.lock().expect("status lock");
            status.completed += 1;
            status.last_error = None;
            drop(status);
            match undone {
                Some(step) => reply(
                    StatusCode::OK,
                    Undone {
                        undone: step,
                        session: session.summary(),
                    },
                ),
                None => reply(
                    StatusCode::OK,
                    Applied {
                        index: session.steps().len() - 1,
                        kind,
                        artifact: session.results().last().and_then(Option::as_ref),
                        session: session.summary(),
                    },
                ),
            }
        }
        Err(e) => {
            entry.status.lock().expect("status lock").last_error = Some(ApiError::from(&e));
            domain(&e)
        }
    };
    let mut status = entry.status.lock().expect("status lock");
    status.pending -= 1;
    status.running = None;
    response
}

async fn post_step(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    // Unknown sessions take precedence over malformed bodies.
    if let Err(r) = state.entry(&id) {
        return r;
    }
    match parse_json::<Step>(&body) {
        Ok(step) => mutate(&state, &id, Mutation::Apply(step)).await,
        Err(e) => bad_request(e),
    }
}

async fn post_undo(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    mutate(&state, &id, Mutation::Undo).await
}

async fn get_biplot(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Response {
    let entry = match state.entry(&id) {
        Ok(e) => e,
        Err(r) => return r,
    };
    let s = match query.get("S").map(|s| IndexSet::parse(s)).transpose() {
        Ok(s) => s,
        Err(e) => return bad_request(ApiError::from(&e).at("S")),
    };
    let session = entry.snapshot();
    let view = tokio::task::spawn_blocking(move || {
        let s = match s {
            Some(s) => s,
            None => {
                // Default to the components of the latest PCA step.
                let last = session.results().iter().rev().find_map(|r| match r {
                    Some(Artifact::Pca(p)) => Some(p.biplot.components.clone()),
                    _ => None,
                });
                last.ok_or_else(|| CoreError::Session("no pca step has been applied".into()))?
            }
        };
        session.biplot(&s)
    })
    .await
    .expect("biplot computation panicked");
    match view {
        Ok(v) => reply(StatusCode::OK, v),
        Err(e) => domain(&e),
    }
}

async fn get_tests(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Response {
    let entry = match state.entry(&id) {
        Ok(e) => e,
        Err(r) => return r,
    };
    let session = entry.snapshot();
    let Some(result) = session.latest_test() else {
        return domain(&CoreError::Session("the session has no t-test step".into()));
    };
    match query.get("format").map(String::as_str) {
        None | Some("json") => reply(StatusCode::OK, result),
        Some("tsv") => (
            StatusCode::OK,
            [(header::CONTENT_TYPE, "text/tab-separated-values")],
            result.table.to_delimited(),
        )
            .into_response(),
        Some(other) => bad_request(ApiError::new("malformed_request", format!("unknown format `{other}`")).at("format")),
    }
}

async fn get_export(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.entry(&id) {
        Ok(entry) => reply(StatusCode::OK, entry.snapshot().export()),
        Err(r) => r,
    }
}

async fn get_status(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.entry(&id) {
        Ok(entry) => {
            let status = entry.status.lock().expect("status lock").clone();
            reply(StatusCode::OK, status)
        }
        Err(r) => r,
    }
}
