use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::hash::domain_content_hash;
use crate::ids::{ClientId, DomainId, FileId, ProcessId, RequestId, RoomId, RunId, UserId};
use crate::status::{RequestStatus, RunStatus};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Availability {
    Available,
    Busy,
    Unreachable,
    Disabled,
}

/// Per-client limits, read from the agent's configuration file and
/// announced to the manager at registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub max_concurrent_runs: u32,
    pub cpu_refusal_threshold_pct: f64,
    pub interactive_allocation_pct: f64,
    pub allow_remote_restart: bool,
    pub heartbeat_interval_s: f64,
    pub cancellation_poll_interval_s: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            max_concurrent_runs: 1,
            cpu_refusal_threshold_pct: 70.0,
            interactive_allocation_pct: 10.0,
            allow_remote_restart: false,
            heartbeat_interval_s: 5.0,
            cancellation_poll_interval_s: 5.0,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrent_runs == 0 {
            return Err("max_concurrent_runs must be at least 1".into());
        }
        let (alloc, refuse) = (self.interactive_allocation_pct, self.cpu_refusal_threshold_pct);
        if !(alloc > 0.0 && alloc < refuse && refuse <= 100.0) {
            return Err(format!(
                "thresholds must satisfy 0 < interactive_allocation_pct ({alloc}) < \
                 cpu_refusal_threshold_pct ({refuse}) <= 100"
            ));
        }
        if self.heartbeat_interval_s <= 0.0 || self.cancellation_poll_interval_s <= 0.0 {
            return Err("poll intervals must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    pub cpu_pct: f64,
    pub ram_pct: f64,
    pub gpu_ram_pct: Option<f64>,
    pub interactive_user_present: bool,
    pub taken_at: Timestamp,
    /// Set when the sampler failed and this is the last known reading.
    #[serde(default)]
    pub stale: bool,
}

impl Default for ResourceSnapshot {
    fn default() -> Self {
        ResourceSnapshot {
            cpu_pct: 0.0,
            ram_pct: 0.0,
            gpu_ram_pct: None,
            interactive_user_present: false,
            taken_at: 0,
            stale: true,
        }
    }
}

impl ResourceSnapshot {
    /// Clamps every percentage into [0, 100].
    pub fn clamped(mut self) -> Self {
        let clamp = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 100.0) };
        self.cpu_pct = clamp(self.cpu_pct);
        self.ram_pct = clamp(self.ram_pct);
        self.gpu_ram_pct = self.gpu_ram_pct.map(clamp);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientNode {
    pub client_id: ClientId,
    /// Stable identity the agent keeps across restarts.
    pub agent_id: String,
    /// `host:port` of the agent's REST surface.
    pub address: String,
    pub rooms: BTreeSet<RoomId>,
    pub has_gpu: bool,
    pub cores: u32,
    pub ram_mb: u64,
    pub snapshot: ResourceSnapshot,
    pub availability: Availability,
    pub config: ClientConfig,
    pub active_run_count: u32,
    pub accepting_new: bool,
}

impl ClientNode {
    pub fn host(&self) -> &str {
        self.address
            .rsplit_once(':')
            .map(|(h, _)| h)
            .unwrap_or(&self.address)
    }

    pub fn spare_slots(&self) -> u32 {
        self.config.max_concurrent_runs.saturating_sub(self.active_run_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Visibility {
    Public,
    Restricted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub room_id: RoomId,
    pub name: String,
    pub owner_user: UserId,
    pub visibility: Visibility,
    pub member_users: BTreeSet<UserId>,
    pub client_ids: BTreeSet<ClientId>,
}

impl Room {
    pub fn accessible_to(&self, user: &UserId) -> bool {
        self.visibility == Visibility::Public
            || &self.owner_user == user
            || self.member_users.contains(user)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainOrigin {
    Store,
    User,
}

/// A reusable execution environment: a build recipe plus a dependency
/// manifest, identified for caching purposes by their content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub domain_id: DomainId,
    pub name: String,
    pub owner_user: UserId,
    pub build_recipe: String,
    pub dependency_manifest: String,
    /// Command template for processes in this domain; `{entry}` is replaced
    /// by the process entry file.
    pub entry_template: String,
    pub origin: DomainOrigin,
    pub approved: bool,
    pub content_hash: String,
}

impl Domain {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        domain_id: DomainId,
        name: impl Into<String>,
        owner_user: UserId,
        build_recipe: impl Into<String>,
        dependency_manifest: impl Into<String>,
        entry_template: impl Into<String>,
        origin: DomainOrigin,
        approved: bool,
    ) -> Self {
        let build_recipe = build_recipe.into();
        let dependency_manifest = dependency_manifest.into();
        let content_hash =
            domain_content_hash(build_recipe.as_bytes(), dependency_manifest.as_bytes());
        Domain {
            domain_id,
            name: name.into(),
            owner_user,
            build_recipe,
            dependency_manifest,
            entry_template: entry_template.into(),
            origin,
            approved,
            content_hash,
        }
    }

    pub fn visible_to(&self, user: &UserId, is_admin: bool) -> bool {
        if is_admin || &self.owner_user == user {
            return true;
        }
        self.origin == DomainOrigin::Store && self.approved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    SingleFile,
    Archive,
}

/// User code registered for execution. The payload bytes live in the
/// manager's blob store; `payload_files` lists the paths inside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessDef {
    pub process_id: ProcessId,
    pub name: String,
    pub owner_user: UserId,
    pub payload_kind: PayloadKind,
    pub payload_files: Vec<String>,
    pub payload_hash: String,
    pub entry_command: String,
}

/// Checks that `entry_command` names exactly one file of the payload and
/// returns that file.
pub fn entry_file_of(entry_command: &str, payload_files: &[String]) -> Result<String, String> {
    if payload_files.is_empty() {
        return Err("payload is empty".into());
    }
    let tokens = shlex::split(entry_command)
        .ok_or_else(|| format!("entry command {entry_command:?} is not valid shell syntax"))?;
    let hits: BTreeSet<&String> = tokens
        .iter()
        .filter(|t| payload_files.iter().any(|f| f == *t))
        .collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().cloned().unwrap_or_default()),
        0 => Err(format!("entry command {entry_command:?} names no payload file")),
        n => Err(format!("entry command {entry_command:?} names {n} payload files")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedFile {
    pub file_id: FileId,
    pub name: String,
    pub size_bytes: u64,
    pub content_hash: String,
    pub owner_user: UserId,
}

/// The resolved, validated content of an execution request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub domain_id: DomainId,
    pub process_id: ProcessId,
    pub repetitions: u32,
    pub parallel: bool,
    pub parameters: Vec<String>,
    pub needs_gpu: bool,
    pub same_machine: bool,
    pub shared_file_ids: BTreeSet<FileId>,
    pub room_ids: BTreeSet<RoomId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: RequestId,
    pub user: UserId,
    #[serde(flatten)]
    pub spec: RequestSpec,
    pub status: RequestStatus,
    pub created_at: Timestamp,
    #[serde(default)]
    pub finished_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub message: String,
    #[serde(default)]
    pub percent: Option<f64>,
}

/// One attempt of one rank of a request, placed on one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRun {
    pub run_id: RunId,
    pub request_id: RequestId,
    pub rank: u32,
    pub client_id: Option<ClientId>,
    pub status: RunStatus,
    pub obs: String,
    pub dispatched_at: Option<Timestamp>,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub output_bundle_ref: Option<String>,
    pub attempt: u32,
    #[serde(default)]
    pub progress: Option<Progress>,
}

impl ProcessRun {
    pub fn pending(run_id: RunId, request_id: RequestId, rank: u32, attempt: u32) -> Self {
        ProcessRun {
            run_id,
            request_id,
            rank,
            client_id: None,
            status: RunStatus::Pending,
            obs: String::new(),
            dispatched_at: None,
            started_at: None,
            finished_at: None,
            output_bundle_ref: None,
            attempt,
            progress: None,
        }
    }
}

/// Archived output directory of one run. `console_log` is the captured
/// `output.txt` and is present (possibly empty) for every bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputBundle {
    pub run_id: RunId,
    #[serde(with = "crate::wire::b64")]
    pub archive: Vec<u8>,
    #[serde(with = "crate::wire::b64")]
    pub console_log: Vec<u8>,
}

/// File name of the captured console inside every output directory.
pub const CONSOLE_FILE: &str = "output.txt";
