//! REST surface. User and administrator routes, plus the agent-facing
//! routes under `/clients/{id}`, all below `/api/v1`.

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONNECTION, CONTENT_TYPE};
use axum::http::{HeaderMap, HeaderValue, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gridforge_core::wire::{
    AssignClient, BarrierReply, ClientView, CreateDomain, CreateProcess, CreateRoom, Created,
    DomainSpec, Heartbeat, HeartbeatAck, ProgressReport, Registered, RegisterClient, RequestView,
    ResultReport, RunIdList, RunTable, StatusReport, API_PREFIX,
};
use gridforge_core::{
    ClientId, Domain, DomainId, FileId, ProcessDef, ProcessId, ProcessRun, RequestForm, RequestId,
    Room, RoomId, RunId, SharedFile,
};
use serde::Deserialize;
use std::path::PathBuf;

use crate::auth::Principal;
use crate::error::{ManagerError, Result};
use crate::service::Manager;

const MAX_BODY: usize = 512 * 1024 * 1024;

impl IntoResponse for ManagerError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

fn principal(m: &Manager, headers: &HeaderMap) -> Result<Principal> {
    let auth = headers.get(AUTHORIZATION).and_then(|v| v.to_str().ok());
    m.tokens().resolve(auth).ok_or(ManagerError::Unauthorized)
}

fn person(m: &Manager, headers: &HeaderMap) -> Result<Principal> {
    match principal(m, headers)? {
        Principal::Agent => Err(ManagerError::Forbidden("agent tokens cannot use user routes".into())),
        p => Ok(p),
    }
}

fn agent(m: &Manager, headers: &HeaderMap) -> Result<()> {
    match principal(m, headers)? {
        Principal::Agent => Ok(()),
        _ => Err(ManagerError::Forbidden("only agents use client routes".into())),
    }
}

fn gzip(bytes: Vec<u8>) -> Response {
    ([(CONTENT_TYPE, "application/gzip")], bytes).into_response()
}

/// Once stopping, every request gets 503 and its connection is closed so
/// pooled keep-alive connections do not outlive this instance.
async fn refuse_when_stopped(State(m): State<Manager>, req: Request, next: Next) -> Response {
    if m.is_stopped() {
        let mut resp = ManagerError::Unavailable("manager is stopping".into()).into_response();
        resp.headers_mut().insert(CONNECTION, HeaderValue::from_static("close"));
        return resp;
    }
    next.run(req).await
}

pub fn router(manager: Manager) -> Router {
    let api = Router::new()
        .route("/requests", post(submit).get(list_requests))
        .route("/requests/{id}", get(request))
        .route("/requests/{id}/cancel", post(cancel))
        .route("/requests/{id}/runs", get(runs))
        .route("/requests/{id}/bundle", get(request_bundle))
        .route("/runs/{id}/bundle", get(run_bundle))
        .route("/files", post(upload_file).get(list_files))
        .route("/domains", post(create_domain).get(list_domains))
        .route("/domains/store", get(list_store_domains))
        .route("/domains/{id}/approve", post(approve_domain))
        .route("/processes", post(create_process).get(list_processes))
        .route("/rooms", post(create_room).get(list_rooms))
        .route("/rooms/{id}/clients", post(assign_client))
        .route("/clients", get(list_clients))
        .route("/clients/register", post(register))
        .route("/clients/{cid}/heartbeat", post(heartbeat))
        .route("/clients/{cid}/cancellations", get(cancellations))
        .route("/clients/{cid}/cancellations/ack", post(ack_cancellations))
        .route("/clients/{cid}/runs/{rid}/status", post(report_status))
        .route("/clients/{cid}/runs/{rid}/result", post(report_result))
        .route("/clients/{cid}/runs/{rid}/progress", post(report_progress))
        .route("/clients/{cid}/runs/{rid}/barrier", get(barrier))
        .route("/clients/{cid}/files/{fid}", get(fetch_file))
        .route("/clients/{cid}/processes/{pid}/payload", get(fetch_payload))
        .route("/clients/{cid}/domains/{did}", get(domain_spec));
    let mut app = Router::new().nest(API_PREFIX, api);
    if let Some(root) = manager.config().web_root.clone() {
        app = app.fallback(move |uri: Uri| static_asset(root.clone(), uri));
    }
    app
        .layer(middleware::from_fn_with_state(manager.clone(), refuse_when_stopped))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(manager)
}

/// Serves a file below `root`; unknown paths fall back to `index.html` so
/// client-side routes survive a reload.
async fn static_asset(root: PathBuf, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let safe = !rel.split('/').any(|c| c == ".." || c.starts_with('.'));
    let mut path = root.join(if rel.is_empty() || !safe { "index.html" } else { rel });
    if !path.is_file() {
        path = root.join("index.html");
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

// ----- requests ---------------------------------------------------------------

async fn submit(State(m): State<Manager>, h: HeaderMap, Json(form): Json<RequestForm>) -> Result<Json<Created>> {
    let p = person(&m, &h)?;
    let id = m.mutate(|s| s.submit_request(&p, &form))?;
    m.wake_scheduler();
    Ok(Json(Created { id: id.0 }))
}

async fn list_requests(State(m): State<Manager>, h: HeaderMap) -> Result<Json<Vec<RequestView>>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.request_views(&p))?))
}

async fn request(State(m): State<Manager>, h: HeaderMap, Path(id): Path<RequestId>) -> Result<Json<RequestView>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.request_view(&p, id))?))
}

async fn cancel(State(m): State<Manager>, h: HeaderMap, Path(id): Path<RequestId>) -> Result<Json<RequestView>> {
    let p = person(&m, &h)?;
    let view = m.mutate(|s| s.cancel_request(&p, id))?;
    m.wake_scheduler();
    Ok(Json(view))
}

async fn runs(State(m): State<Manager>, h: HeaderMap, Path(id): Path<RequestId>) -> Result<Json<RunTable>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.run_table(&p, id))?))
}

#[derive(Deserialize)]
struct BundleQuery {
    #[serde(default)]
    partial: bool,
}

async fn request_bundle(
    State(m): State<Manager>,
    h: HeaderMap,
    Path(id): Path<RequestId>,
    Query(q): Query<BundleQuery>,
) -> Result<Response> {
    let p = person(&m, &h)?;
    Ok(gzip(m.read(|s| s.request_bundle(&p, id, q.partial))?))
}

async fn run_bundle(State(m): State<Manager>, h: HeaderMap, Path(id): Path<RunId>) -> Result<Response> {
    let p = person(&m, &h)?;
    Ok(gzip(m.read(|s| s.run_bundle(&p, id))?))
}

// ----- catalog ----------------------------------------------------------------

#[derive(Deserialize)]
struct FileQuery {
    name: String,
}

async fn upload_file(
    State(m): State<Manager>,
    h: HeaderMap,
    Query(q): Query<FileQuery>,
    body: Bytes,
) -> Result<Json<Created>> {
    let p = person(&m, &h)?;
    let id = m.mutate(|s| s.upload_file(&p, &q.name, &body))?;
    Ok(Json(Created { id: id.0 }))
}

async fn list_files(State(m): State<Manager>, h: HeaderMap) -> Result<Json<Vec<SharedFile>>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.files_for(&p))?))
}

async fn create_domain(State(m): State<Manager>, h: HeaderMap, Json(body): Json<CreateDomain>) -> Result<Json<Created>> {
    let p = person(&m, &h)?;
    let id = m.mutate(|s| s.create_domain(&p, body))?;
    Ok(Json(Created { id: id.0 }))
}

async fn list_domains(State(m): State<Manager>, h: HeaderMap) -> Result<Json<Vec<Domain>>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.domains_for(&p, false))?))
}

async fn list_store_domains(State(m): State<Manager>, h: HeaderMap) -> Result<Json<Vec<Domain>>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.domains_for(&p, true))?))
}

async fn approve_domain(State(m): State<Manager>, h: HeaderMap, Path(id): Path<DomainId>) -> Result<Json<Domain>> {
    let p = person(&m, &h)?;
    Ok(Json(m.mutate(|s| s.approve_domain(&p, id))?))
}

async fn create_process(
    State(m): State<Manager>,
    h: HeaderMap,
    Json(body): Json<CreateProcess>,
) -> Result<Json<Created>> {
    let p = person(&m, &h)?;
    let id = m.mutate(|s| s.create_process(&p, body))?;
    Ok(Json(Created { id: id.0 }))
}

async fn list_processes(State(m): State<Manager>, h: HeaderMap) -> Result<Json<Vec<ProcessDef>>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.processes_for(&p))?))
}

async fn create_room(State(m): State<Manager>, h: HeaderMap, Json(body): Json<CreateRoom>) -> Result<Json<Created>> {
    let p = person(&m, &h)?;
    let id = m.mutate(|s| s.create_room(&p, body))?;
    Ok(Json(Created { id: id.0 }))
}

async fn list_rooms(State(m): State<Manager>, h: HeaderMap) -> Result<Json<Vec<Room>>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.rooms_for(&p))?))
}

async fn assign_client(
    State(m): State<Manager>,
    h: HeaderMap,
    Path(room): Path<RoomId>,
    Json(body): Json<AssignClient>,
) -> Result<Json<Room>> {
    let p = person(&m, &h)?;
    let room = m.mutate(|s| s.assign_client_to_room(&p, body.client_id, room))?;
    m.wake_scheduler();
    Ok(Json(room))
}

async fn list_clients(State(m): State<Manager>, h: HeaderMap) -> Result<Json<Vec<ClientView>>> {
    let p = person(&m, &h)?;
    Ok(Json(m.read(|s| s.client_views(&p))?))
}

// ----- agent routes -----------------------------------------------------------

async fn register(State(m): State<Manager>, h: HeaderMap, Json(body): Json<RegisterClient>) -> Result<Json<Registered>> {
    agent(&m, &h)?;
    let client_id = m.mutate(|s| s.register_client(body))?;
    m.wake_scheduler();
    Ok(Json(Registered { client_id }))
}

async fn heartbeat(
    State(m): State<Manager>,
    h: HeaderMap,
    Path(cid): Path<ClientId>,
    Json(body): Json<Heartbeat>,
) -> Result<Json<HeartbeatAck>> {
    agent(&m, &h)?;
    let accepting = body.accepting_new;
    let known = m.mutate(|s| Ok(s.heartbeat(cid, body)))?;
    if known && accepting {
        m.wake_scheduler();
    }
    Ok(Json(HeartbeatAck { known }))
}

async fn cancellations(State(m): State<Manager>, h: HeaderMap, Path(cid): Path<ClientId>) -> Result<Json<RunIdList>> {
    agent(&m, &h)?;
    Ok(Json(RunIdList {
        run_ids: m.read(|s| s.pending_cancellations(cid)),
    }))
}

async fn ack_cancellations(
    State(m): State<Manager>,
    h: HeaderMap,
    Path(cid): Path<ClientId>,
    Json(body): Json<RunIdList>,
) -> Result<Json<serde_json::Value>> {
    agent(&m, &h)?;
    m.mutate(|s| {
        s.ack_cancellations(cid, &body.run_ids);
        Ok(())
    })?;
    Ok(Json(serde_json::json!({})))
}

async fn report_status(
    State(m): State<Manager>,
    h: HeaderMap,
    Path((cid, rid)): Path<(ClientId, RunId)>,
    Json(body): Json<StatusReport>,
) -> Result<Json<ProcessRun>> {
    agent(&m, &h)?;
    Ok(Json(m.mutate(|s| s.report_status(cid, rid, body))?))
}

async fn report_result(
    State(m): State<Manager>,
    h: HeaderMap,
    Path((cid, rid)): Path<(ClientId, RunId)>,
    Json(body): Json<ResultReport>,
) -> Result<Json<ProcessRun>> {
    agent(&m, &h)?;
    let run = m.mutate(|s| s.record_run_result(cid, rid, body))?;
    m.wake_scheduler();
    Ok(Json(run))
}

async fn report_progress(
    State(m): State<Manager>,
    h: HeaderMap,
    Path((cid, rid)): Path<(ClientId, RunId)>,
    Json(body): Json<ProgressReport>,
) -> Result<Json<serde_json::Value>> {
    agent(&m, &h)?;
    m.mutate(|s| s.report_progress(cid, rid, body.progress))?;
    Ok(Json(serde_json::json!({})))
}

async fn barrier(
    State(m): State<Manager>,
    h: HeaderMap,
    Path((cid, rid)): Path<(ClientId, RunId)>,
) -> Result<Json<BarrierReply>> {
    agent(&m, &h)?;
    Ok(Json(m.mutate(|s| s.barrier_poll(cid, rid))?))
}

async fn fetch_file(
    State(m): State<Manager>,
    h: HeaderMap,
    Path((cid, fid)): Path<(ClientId, FileId)>,
) -> Result<Response> {
    agent(&m, &h)?;
    let bytes = m.mutate(|s| s.serve_shared_file(cid, fid))?;
    Ok(([(CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn fetch_payload(
    State(m): State<Manager>,
    h: HeaderMap,
    Path((_cid, pid)): Path<(ClientId, ProcessId)>,
) -> Result<Response> {
    agent(&m, &h)?;
    Ok(gzip(m.read(|s| s.payload(pid))?))
}

async fn domain_spec(
    State(m): State<Manager>,
    h: HeaderMap,
    Path((_cid, did)): Path<(ClientId, DomainId)>,
) -> Result<Json<DomainSpec>> {
    agent(&m, &h)?;
    Ok(Json(m.read(|s| s.domain_spec(did))?))
}
