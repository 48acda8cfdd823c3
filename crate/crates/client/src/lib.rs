//! Typed HTTP client for the gridforge REST surfaces.
//!
//! [`ApiClient`] talks to the manager under `/api/v1` with a bearer token;
//! it carries both the user/admin calls used by the CLI and the calls an
//! agent makes. [`AgentClient`] is what the manager uses to reach agents.

use std::fmt;
use std::time::Duration;

use gridforge_core::wire::{
    AgentPing, AgentRunView, ApiErrorBody, ApiErrorKind, AssignClient, BarrierReply, ClientView,
    CreateDomain, CreateProcess, CreateRoom, Created, DispatchEnvelope, DispatchReply,
    DomainSpec, Heartbeat, HeartbeatAck, ProgressReport, Registered, RegisterClient,
    RequestView, ResultReport, RunIdList, RunTable, StatusReport, AGENT_PREFIX, API_PREFIX,
};
use gridforge_core::{
    ClientId, Domain, DomainId, FileId, ProcessDef, ProcessId, ProcessRun, Progress, RequestForm,
    RequestId, Room, RoomId, RunId, SharedFile,
};
use reqwest::{Method, RequestBuilder, Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("{} ({status}): {}", kind_label(body.error), body.message)]
    Api { status: u16, body: ApiErrorBody },
    #[error("unexpected response: {0}")]
    Decode(String),
}

fn kind_label(kind: ApiErrorKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{kind:?}"))
}

impl ClientError {
    pub fn kind(&self) -> Option<ApiErrorKind> {
        match self {
            ClientError::Api { body, .. } => Some(body.error),
            _ => None,
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        if e.is_decode() {
            ClientError::Decode(e.to_string())
        } else {
            ClientError::Transport(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

async fn check(resp: Response) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let bytes = resp.bytes().await?;
    let body = serde_json::from_slice::<ApiErrorBody>(&bytes).unwrap_or_else(|_| ApiErrorBody {
        error: fallback_kind(status),
        message: String::from_utf8_lossy(&bytes).into_owned(),
        fields: vec![],
    });
    Err(ClientError::Api {
        status: status.as_u16(),
        body,
    })
}

fn fallback_kind(status: StatusCode) -> ApiErrorKind {
    match status {
        StatusCode::UNAUTHORIZED => ApiErrorKind::Unauthorized,
        StatusCode::FORBIDDEN => ApiErrorKind::Forbidden,
        StatusCode::NOT_FOUND => ApiErrorKind::NotFound,
        StatusCode::BAD_REQUEST | StatusCode::UNPROCESSABLE_ENTITY => ApiErrorKind::Validation,
        StatusCode::CONFLICT => ApiErrorKind::Conflict,
        _ => ApiErrorKind::Internal,
    }
}

/// Client for the manager's `/api/v1` surface.
#[derive(Clone)]
pub struct ApiClient {
    base: String,
    token: String,
    http: reqwest::Client,
}

impl fmt::Debug for ApiClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApiClient")
            .field("base", &self.base)
            .field("token", &"<redacted>")
            .finish()
    }
}

impl ApiClient {
    pub fn new(base_url: &str, token: &str) -> Self {
        Self::with_timeout(base_url, token, Duration::from_secs(30))
    }

    pub fn with_timeout(base_url: &str, token: &str, timeout: Duration) -> Self {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout.min(Duration::from_secs(5)))
            .build()
            .unwrap_or_default();
        ApiClient {
            base: base_url.trim_end_matches('/').to_string(),
            token: token.to_string(),
            http,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn req(&self, method: Method, path: &str) -> RequestBuilder {
        self.http
            .request(method, format!("{}{API_PREFIX}{path}", self.base))
            .bearer_auth(&self.token)
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Ok(check(self.req(Method::GET, path).send().await?).await?.json().await?)
    }

    async fn get_bytes(&self, path: &str) -> Result<Vec<u8>> {
        let resp = check(self.req(Method::GET, path).send().await?).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.req(Method::POST, path).json(body).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    // Requests.

    pub async fn submit(&self, form: &RequestForm) -> Result<RequestId> {
        let c: Created = self.post("/requests", form).await?;
        Ok(RequestId(c.id))
    }

    pub async fn requests(&self) -> Result<Vec<RequestView>> {
        self.get("/requests").await
    }

    pub async fn request(&self, id: RequestId) -> Result<RequestView> {
        self.get(&format!("/requests/{id}")).await
    }

    pub async fn cancel(&self, id: RequestId) -> Result<RequestView> {
        self.post(&format!("/requests/{id}/cancel"), &serde_json::json!({})).await
    }

    pub async fn runs(&self, id: RequestId) -> Result<RunTable> {
        self.get(&format!("/requests/{id}/runs")).await
    }

    /// The aggregated archive; `partial` allows downloading before completion.
    pub async fn request_bundle(&self, id: RequestId, partial: bool) -> Result<Vec<u8>> {
        let q = if partial { "?partial=true" } else { "" };
        self.get_bytes(&format!("/requests/{id}/bundle{q}")).await
    }

    pub async fn run_bundle(&self, id: RunId) -> Result<Vec<u8>> {
        self.get_bytes(&format!("/runs/{id}/bundle")).await
    }

    // Catalog.

    pub async fn upload_file(&self, name: &str, bytes: Vec<u8>) -> Result<FileId> {
        let url = reqwest::Url::parse_with_params(
            &format!("{}{API_PREFIX}/files", self.base),
            &[("name", name)],
        )
        .map_err(|e| ClientError::Transport(e.to_string()))?;
        let resp = self
            .http
            .post(url)
            .bearer_auth(&self.token)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(bytes)
            .send()
            .await?;
        let c: Created = check(resp).await?.json().await?;
        Ok(FileId(c.id))
    }

    pub async fn files(&self) -> Result<Vec<SharedFile>> {
        self.get("/files").await
    }

    pub async fn create_domain(&self, body: &CreateDomain) -> Result<DomainId> {
        let c: Created = self.post("/domains", body).await?;
        Ok(DomainId(c.id))
    }

    pub async fn domains(&self) -> Result<Vec<Domain>> {
        self.get("/domains").await
    }

    pub async fn store_domains(&self) -> Result<Vec<Domain>> {
        self.get("/domains/store").await
    }

    pub async fn approve_domain(&self, id: DomainId) -> Result<Domain> {
        self.post(&format!("/domains/{id}/approve"), &serde_json::json!({})).await
    }

    pub async fn create_process(&self, body: &CreateProcess) -> Result<ProcessId> {
        let c: Created = self.post("/processes", body).await?;
        Ok(ProcessId(c.id))
    }

    pub async fn processes(&self) -> Result<Vec<ProcessDef>> {
        self.get("/processes").await
    }

    pub async fn create_room(&self, body: &CreateRoom) -> Result<RoomId> {
        let c: Created = self.post("/rooms", body).await?;
        Ok(RoomId(c.id))
    }

    pub async fn rooms(&self) -> Result<Vec<Room>> {
        self.get("/rooms").await
    }

    pub async fn assign_client(&self, room: RoomId, client: ClientId) -> Result<Room> {
        self.post(&format!("/rooms/{room}/clients"), &AssignClient { client_id: client })
            .await
    }

    pub async fn clients(&self) -> Result<Vec<ClientView>> {
        self.get("/clients").await
    }

    // Agent side.

    pub async fn register(&self, body: &RegisterClient) -> Result<Registered> {
        self.post("/clients/register", body).await
    }

    pub async fn heartbeat(&self, client: ClientId, body: &Heartbeat) -> Result<HeartbeatAck> {
        self.post(&format!("/clients/{client}/heartbeat"), body).await
    }

    pub async fn cancellations(&self, client: ClientId) -> Result<RunIdList> {
        self.get(&format!("/clients/{client}/cancellations")).await
    }

    pub async fn ack_cancellations(&self, client: ClientId, runs: &RunIdList) -> Result<()> {
        let _: serde_json::Value = self
            .post(&format!("/clients/{client}/cancellations/ack"), runs)
            .await?;
        Ok(())
    }

    pub async fn report_status(&self, client: ClientId, run: RunId, body: &StatusReport) -> Result<ProcessRun> {
        self.post(&format!("/clients/{client}/runs/{run}/status"), body).await
    }

    pub async fn report_result(&self, client: ClientId, run: RunId, body: &ResultReport) -> Result<ProcessRun> {
        self.post(&format!("/clients/{client}/runs/{run}/result"), body).await
    }

    pub async fn report_progress(&self, client: ClientId, run: RunId, progress: &Progress) -> Result<()> {
        let body = ProgressReport {
            progress: progress.clone(),
        };
        let _: serde_json::Value = self
            .post(&format!("/clients/{client}/runs/{run}/progress"), &body)
            .await?;
        Ok(())
    }

    pub async fn barrier(&self, client: ClientId, run: RunId) -> Result<BarrierReply> {
        self.get(&format!("/clients/{client}/runs/{run}/barrier")).await
    }

    pub async fn fetch_file(&self, client: ClientId, file: FileId) -> Result<Vec<u8>> {
        self.get_bytes(&format!("/clients/{client}/files/{file}")).await
    }

    pub async fn fetch_payload(&self, client: ClientId, process: ProcessId) -> Result<Vec<u8>> {
        self.get_bytes(&format!("/clients/{client}/processes/{process}/payload"))
            .await
    }

    pub async fn domain_spec(&self, client: ClientId, domain: DomainId) -> Result<DomainSpec> {
        self.get(&format!("/clients/{client}/domains/{domain}")).await
    }
}

/// Client for an agent's `/agent/v1` surface, addressed by `host:port`.
#[derive(Clone)]
pub struct AgentClient {
    token: String,
    http: reqwest::Client,
}

impl fmt::Debug for AgentClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentClient").field("token", &"<redacted>").finish()
    }
}

impl AgentClient {
    pub fn new(token: &str, timeout: Duration) -> Self {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .build()
            .unwrap_or_default();
        AgentClient {
            token: token.to_string(),
            http,
        }
    }

    fn req(&self, method: Method, address: &str, path: &str) -> RequestBuilder {
        self.http
            .request(method, format!("http://{address}{AGENT_PREFIX}{path}"))
            .bearer_auth(&self.token)
    }

    pub async fn ping(&self, address: &str) -> Result<AgentPing> {
        let resp = self.req(Method::GET, address, "/ping").send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn dispatch(&self, address: &str, envelope: &DispatchEnvelope) -> Result<DispatchReply> {
        let resp = self.req(Method::POST, address, "/dispatch").json(envelope).send().await?;
        Ok(check(resp).await?.json().await?)
    }

    pub async fn runs(&self, address: &str) -> Result<Vec<AgentRunView>> {
        let resp = self.req(Method::GET, address, "/runs").send().await?;
        Ok(check(resp).await?.json().await?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn debug_never_shows_token() {
        let c = ApiClient::new("http://127.0.0.1:1/", "s3cret-token");
        let shown = format!("{c:?}");
        assert!(!shown.contains("s3cret"));
        assert_eq!(c.base_url(), "http://127.0.0.1:1");
        assert!(!format!("{:?}", AgentClient::new("s3cret", Duration::from_secs(1))).contains("s3cret"));
    }

    #[test]
    fn error_kinds_fall_back_on_status() {
        assert_eq!(fallback_kind(StatusCode::FORBIDDEN), ApiErrorKind::Forbidden);
        assert_eq!(fallback_kind(StatusCode::BAD_GATEWAY), ApiErrorKind::Internal);
    }

    #[tokio::test]
    async fn unreachable_manager_is_transport_error() {
        let c = ApiClient::with_timeout("http://127.0.0.1:9", "t", Duration::from_millis(500));
        let err = c.requests().await.unwrap_err();
        assert!(err.is_transport(), "{err}");
        assert_eq!(err.kind(), None);
    }
}
