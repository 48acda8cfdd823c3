//! Bodies exchanged over the REST surfaces of the manager (`/api/v1`) and
//! the client agent (`/agent/v1`). All of them are JSON.

use serde::{Deserialize, Serialize};

use crate::ids::{ClientId, DomainId, FileId, ProcessId, RequestId, RunId, UserId};
use crate::model::{
    Availability, ClientConfig, DomainOrigin, OutputBundle, PayloadKind, ProcessRun, Progress,
    Request, ResourceSnapshot, Visibility,
};
use crate::status::{RunEvent, RunStatus};
use crate::validate::FieldError;

pub const API_PREFIX: &str = "/api/v1";
pub const AGENT_PREFIX: &str = "/agent/v1";

/// Serde helper storing byte vectors as standard base64 strings.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterClient {
    pub agent_id: String,
    pub address: String,
    pub has_gpu: bool,
    pub cores: u32,
    pub ram_mb: u64,
    pub config: ClientConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registered {
    pub client_id: ClientId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub snapshot: ResourceSnapshot,
    pub accepting_new: bool,
    pub active_runs: Vec<RunId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatAck {
    /// False when the manager has no record of this client; the agent
    /// should register again.
    pub known: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRef {
    pub domain_id: DomainId,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessRef {
    pub process_id: ProcessId,
    pub payload_hash: String,
    pub entry_command: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedFileRef {
    pub file_id: FileId,
    pub name: String,
    pub content_hash: String,
}

/// Everything an agent needs to stage and launch one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchEnvelope {
    pub run_id: RunId,
    pub request_id: RequestId,
    pub user: UserId,
    pub rank: u32,
    pub repetitions: u32,
    pub attempt: u32,
    pub parallel: bool,
    pub needs_gpu: bool,
    pub parameters: Vec<String>,
    pub domain: DomainRef,
    pub process: ProcessRef,
    pub shared_files: Vec<SharedFileRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefuseReason {
    Capacity,
    Threshold,
    Unavailable,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DispatchReply {
    Ack {
        run_id: RunId,
        /// Port reserved by the rank-0 agent of a parallel request.
        rendezvous_port: Option<u16>,
    },
    Refuse {
        reason: RefuseReason,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub event: RunEvent,
    #[serde(default)]
    pub obs: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Succeeded,
    Failed,
    /// Killed on a cancellation notice.
    Canceled,
    /// The agent lost track of the executor, e.g. across a restart.
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultReport {
    pub outcome: RunOutcome,
    #[serde(default)]
    pub exit_code: Option<i32>,
    #[serde(default)]
    pub obs: String,
    #[serde(default)]
    pub bundle: Option<OutputBundle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "barrier", rename_all = "snake_case")]
pub enum BarrierReply {
    Hold,
    Release { master_addr: String, master_port: u16 },
    /// The request ended before release; the run must not start.
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunIdList {
    pub run_ids: Vec<RunId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub build_recipe: String,
    pub dependency_manifest: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPing {
    pub agent_id: String,
    pub client_id: Option<ClientId>,
    pub active_runs: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRunView {
    pub run_id: RunId,
    pub request_id: RequestId,
    pub rank: u32,
    pub attempt: u32,
    pub local_status: RunStatus,
    pub exit_code: Option<i32>,
    pub restarts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateRoom {
    pub name: String,
    pub visibility: Visibility,
    #[serde(default)]
    pub members: Vec<UserId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignClient {
    pub client_id: ClientId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateDomain {
    pub name: String,
    pub build_recipe: String,
    #[serde(default)]
    pub dependency_manifest: String,
    pub entry_template: String,
    pub origin: DomainOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateProcess {
    pub name: String,
    pub payload_kind: PayloadKind,
    /// For `SingleFile`, the raw file; for `Archive`, a gzipped tar.
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    /// Required for `SingleFile` payloads.
    #[serde(default)]
    pub file_name: Option<String>,
    /// Either a full command, or absent to derive it from the domain's
    /// entry template and `entry_file`.
    #[serde(default)]
    pub entry_command: Option<String>,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub entry_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Created {
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientView {
    pub client_id: ClientId,
    /// Display name: the agent's self-chosen id.
    pub name: String,
    pub address: String,
    pub room: Option<String>,
    pub availability: Availability,
    pub accepting_new: bool,
    pub has_gpu: bool,
    pub slots: u32,
    pub active_runs: u32,
    pub snapshot: ResourceSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestView {
    pub request: Request,
    pub succeeded: u32,
    /// Fraction of ranks completed, in [0, 1].
    pub progress: f64,
    pub archive_ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTable {
    pub request_id: RequestId,
    pub runs: Vec<ProcessRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressReport {
    #[serde(flatten)]
    pub progress: Progress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiErrorKind {
    Validation,
    Unauthorized,
    Forbidden,
    NotFound,
    NotReady,
    AlreadyTerminal,
    StaleAttempt,
    NotParallel,
    Conflict,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub error: ApiErrorKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}
