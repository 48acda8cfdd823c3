//! The agent's own HTTP surface, called by the manager.

use axum::extract::{Path, Request, State};
use axum::http::header::{AUTHORIZATION, CONNECTION};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gridforge_core::wire::{AgentPing, AgentRunView, ApiErrorBody, ApiErrorKind, DispatchEnvelope, DispatchReply};
use gridforge_core::{Progress, RunId};

use crate::agent::Agent;

fn error(status: StatusCode, kind: ApiErrorKind, message: &str) -> Response {
    let body = ApiErrorBody {
        error: kind,
        message: message.into(),
        fields: Vec::new(),
    };
    (status, Json(body)).into_response()
}

fn authorized(agent: &Agent, h: &HeaderMap) -> bool {
    let expected = format!("Bearer {}", agent.config().token);
    h.get(AUTHORIZATION).and_then(|v| v.to_str().ok()) == Some(expected.as_str())
}

/// While the simulated link is down the agent looks unreachable.
async fn offline_guard(State(agent): State<Agent>, req: Request, next: Next) -> Response {
    if !agent.gate().is_online() || !agent.is_alive() {
        let mut resp = error(StatusCode::SERVICE_UNAVAILABLE, ApiErrorKind::Internal, "network unreachable");
        resp.headers_mut().insert(CONNECTION, HeaderValue::from_static("close"));
        return resp;
    }
    next.run(req).await
}

async fn require_token(State(agent): State<Agent>, req: Request, next: Next) -> Response {
    if !authorized(&agent, req.headers()) {
        return error(StatusCode::UNAUTHORIZED, ApiErrorKind::Unauthorized, "missing or wrong token");
    }
    next.run(req).await
}

pub fn router(agent: Agent) -> Router {
    let authed = Router::new()
        .route("/ping", get(ping))
        .route("/dispatch", post(dispatch))
        .route("/runs", get(runs))
        .route("/runs/{id}", get(run))
        .layer(middleware::from_fn_with_state(agent.clone(), require_token));
    // User code reports progress from inside the run without credentials.
    let open = Router::new().route("/runs/{id}/progress", post(progress));
    Router::new()
        .nest("/agent/v1", authed.merge(open))
        .layer(middleware::from_fn_with_state(agent.clone(), offline_guard))
        .with_state(agent)
}

async fn ping(State(agent): State<Agent>) -> Json<AgentPing> {
    Json(agent.ping())
}

async fn dispatch(State(agent): State<Agent>, Json(env): Json<DispatchEnvelope>) -> Json<DispatchReply> {
    Json(agent.accept_run(env))
}

async fn runs(State(agent): State<Agent>) -> Json<Vec<AgentRunView>> {
    Json(agent.run_views())
}

async fn run(State(agent): State<Agent>, Path(id): Path<RunId>) -> Response {
    match agent.run_view(id) {
        Some(v) => Json(v).into_response(),
        None => error(StatusCode::NOT_FOUND, ApiErrorKind::NotFound, "unknown run"),
    }
}

async fn progress(State(agent): State<Agent>, Path(id): Path<RunId>, Json(p): Json<Progress>) -> Response {
    if agent.forward_progress(id, p) {
        StatusCode::NO_CONTENT.into_response()
    } else {
        error(StatusCode::NOT_FOUND, ApiErrorKind::NotFound, "no live run with that id")
    }
}
