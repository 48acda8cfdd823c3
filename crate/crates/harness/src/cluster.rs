//! A manager and N agents on loopback, wired as in production except for
//! the sandbox executor, scripted resource samplers and compressed periods.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use gridforge_agent::{AgentConfig, AgentHandle, ScriptedSampler};
use gridforge_client::ApiClient;
use gridforge_core::events::{EventSink, SharedSink, TraceEvent};
use gridforge_core::wire::{CreateDomain, CreateProcess, CreateRoom};
use gridforge_core::{
    ClientConfig, ClientId, ClientNode, DomainOrigin, FileId, PayloadKind, RequestForm, RequestId, RequestStatus,
    Visibility,
};
use gridforge_executor::{Executor, SandboxExecutor};
use gridforge_manager::config::{MonitorPeriods, Role, TokenEntry};
use gridforge_manager::{serve, ClientHooks, Manager, ManagerConfig, ManagerHandle};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use crate::error::HarnessError;
use crate::trace::{Collector, Trace};
use crate::workload::{Job, JOB_FILE, SPEED_ENV};

pub const ADMIN_TOKEN: &str = "admin-token";
pub const AGENT_TOKEN: &str = "agent-token";
/// Users with a token each: `<name>-token`.
pub const USERS: [&str; 3] = ["alice", "bob", "carol"];
pub const SYNTHETIC_DOMAIN: &str = "Synthetic";
pub const PUBLIC_ROOM: &str = "Public";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientSpec {
    pub name: Option<String>,
    pub slots: u32,
    /// Divides every sleep of the synthetic workload on this client.
    pub speed: f64,
    pub has_gpu: bool,
    pub cpu_refusal_threshold_pct: f64,
    pub interactive_allocation_pct: f64,
    pub allow_remote_restart: bool,
    /// Room the client is assigned to; `Public` when unset.
    pub room: Option<String>,
    /// Initial scripted CPU load.
    pub cpu_pct: f64,
    pub ram_mb: u64,
}

impl Default for ClientSpec {
    fn default() -> Self {
        let c = ClientConfig::default();
        ClientSpec {
            name: None,
            slots: 1,
            speed: 1.0,
            has_gpu: false,
            cpu_refusal_threshold_pct: c.cpu_refusal_threshold_pct,
            interactive_allocation_pct: c.interactive_allocation_pct,
            allow_remote_restart: false,
            room: None,
            cpu_pct: 5.0,
            ram_mb: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub clients: Vec<ClientSpec>,
    /// Divides monitor, heartbeat and polling periods. Workload sleeps are
    /// not compressed.
    pub time_compression: f64,
    pub retry_cap: u32,
    pub missed_ping_threshold: u32,
    pub max_restarts: u32,
    pub seed: u64,
    /// Path of the `gridforge-workload` binary; found next to the running
    /// executable when unset.
    pub workload_bin: Option<PathBuf>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            clients: vec![ClientSpec::default()],
            time_compression: 10.0,
            retry_cap: 5,
            missed_ping_threshold: 3,
            max_restarts: 3,
            seed: 0,
            workload_bin: None,
        }
    }
}

impl ClusterSpec {
    /// `n` identical clients with `slots` each.
    pub fn uniform(n: usize, slots: u32) -> Self {
        ClusterSpec {
            clients: vec![ClientSpec { slots, ..ClientSpec::default() }; n],
            ..ClusterSpec::default()
        }
    }

    pub fn with_speeds(speeds: &[f64], slots: u32) -> Self {
        ClusterSpec {
            clients: speeds
                .iter()
                .map(|&speed| ClientSpec { slots, speed, ..ClientSpec::default() })
                .collect(),
            ..ClusterSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.clients.is_empty() {
            return Err("a cluster needs at least one client".into());
        }
        if let Some(c) = self.clients.iter().find(|c| !(c.speed.is_finite() && c.speed > 0.0)) {
            return Err(format!("speed factor must be positive, got {}", c.speed));
        }
        if !(self.time_compression.is_finite() && self.time_compression > 0.0) {
            return Err("time_compression must be positive".into());
        }
        Ok(())
    }

    fn manager_periods(&self) -> MonitorPeriods {
        MonitorPeriods::default().compressed(self.time_compression)
    }
}

/// Finds `gridforge-workload` beside the current executable or one level
/// up (integration tests run from `target/<profile>/deps`).
pub fn default_workload_bin() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?;
    [dir.to_path_buf(), dir.parent()?.to_path_buf()]
        .into_iter()
        .map(|d| d.join("gridforge-workload"))
        .find(|p| p.is_file())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Up,
    Disconnected,
    Crashed,
}

pub struct Node {
    pub name: String,
    pub client_id: ClientId,
    pub sampler: Arc<ScriptedSampler>,
    pub exec: Arc<SandboxExecutor>,
    cfg: AgentConfig,
    addr: SocketAddr,
    handle: Option<AgentHandle>,
    state: NodeState,
}

impl Node {
    pub fn state(&self) -> NodeState {
        self.state
    }

    pub fn source(&self) -> String {
        format!("agent:{}", self.name)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }
}

/// Lets the manager's liveness monitor restart crashed agents whose
/// client allows it.
struct HarnessHooks {
    crashed: Mutex<HashSet<String>>,
    restart_tx: mpsc::UnboundedSender<String>,
}

impl ClientHooks for HarnessHooks {
    fn host_reachable(&self, client: &ClientNode) -> bool {
        self.crashed.lock().contains(&client.agent_id)
    }

    fn restart_agent(&self, client: &ClientNode) {
        let _ = self.restart_tx.send(client.agent_id.clone());
    }
}

pub struct Cluster {
    spec: ClusterSpec,
    dir: tempfile::TempDir,
    collector: Arc<Collector>,
    mcfg: ManagerConfig,
    manager: Option<ManagerHandle>,
    manager_addr: SocketAddr,
    hooks: Arc<HarnessHooks>,
    restart_rx: mpsc::UnboundedReceiver<String>,
    nodes: Vec<Node>,
    workload_bin: PathBuf,
}

fn tokens() -> Vec<TokenEntry> {
    let mut t = vec![
        TokenEntry { token: ADMIN_TOKEN.into(), role: Role::Admin, user: None },
        TokenEntry { token: AGENT_TOKEN.into(), role: Role::Agent, user: None },
    ];
    t.extend(USERS.iter().map(|u| TokenEntry {
        token: format!("{u}-token"),
        role: Role::User,
        user: Some((*u).into()),
    }));
    t
}

async fn bind_retrying(addr: SocketAddr) -> std::io::Result<TcpListener> {
    let mut last = None;
    for _ in 0..100 {
        match TcpListener::bind(addr).await {
            Ok(l) => return Ok(l),
            Err(e) => {
                last = Some(e);
                tokio::time::sleep(Duration::from_millis(30)).await;
            }
        }
    }
    Err(last.expect("tried at least once"))
}

fn spawn_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Spawn(e.to_string())
}

impl Cluster {
    /// Starts the manager and every agent, assigns rooms and installs the
    /// synthetic workload domain.
    pub async fn spawn(spec: ClusterSpec) -> Result<Cluster, HarnessError> {
        spec.validate().map_err(HarnessError::Spawn)?;
        let workload_bin = match &spec.workload_bin {
            Some(p) => p.clone(),
            None => default_workload_bin().ok_or_else(|| spawn_err("gridforge-workload binary not found"))?,
        };
        if !workload_bin.is_file() {
            return Err(spawn_err(format!("{} is not a file", workload_bin.display())));
        }
        let dir = tempfile::Builder::new().prefix("gridforge-sim-").tempdir().map_err(spawn_err)?;
        let collector = Arc::new(Collector::new());
        let (restart_tx, restart_rx) = mpsc::unbounded_channel();
        let hooks = Arc::new(HarnessHooks {
            crashed: Mutex::new(HashSet::new()),
            restart_tx,
        });
        let k = spec.time_compression;
        let mcfg = ManagerConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            state_dir: Some(dir.path().join("manager")),
            tokens: tokens(),
            periods: spec.manager_periods(),
            missed_ping_threshold: spec.missed_ping_threshold,
            retry_cap: spec.retry_cap,
            ping_timeout_s: (2.0 / k).max(0.25),
            dispatch_timeout_s: 10.0,
            ..ManagerConfig::default()
        };
        mcfg.validate().map_err(HarnessError::Spawn)?;
        let listener = TcpListener::bind(mcfg.listen).await.map_err(spawn_err)?;
        let manager_addr = listener.local_addr().map_err(spawn_err)?;
        let sink: SharedSink = collector.clone();
        let m = Manager::open(mcfg.clone(), sink, hooks.clone()).map_err(spawn_err)?;
        let manager = serve(m, listener).await.map_err(spawn_err)?;

        let mut cluster = Cluster {
            spec,
            dir,
            collector,
            mcfg,
            manager: Some(manager),
            manager_addr,
            hooks,
            restart_rx,
            nodes: Vec::new(),
            workload_bin,
        };
        cluster.install_domain().await?;
        for i in 0..cluster.spec.clients.len() {
            cluster.spawn_node(i).await?;
        }
        Ok(cluster)
    }

    async fn install_domain(&self) -> Result<(), HarnessError> {
        let bin = shlex::try_quote(&self.workload_bin.to_string_lossy())
            .map_err(spawn_err)?
            .into_owned();
        let manifest = format!("mkdir -p \"$IMAGE_DIR/bin\"\nln -sf {bin} \"$IMAGE_DIR/bin/gridforge-workload\"\n");
        self.admin()
            .create_domain(&CreateDomain {
                name: SYNTHETIC_DOMAIN.into(),
                build_recipe: "FROM gridforge/synthetic\nENV GRIDFORGE_SYNTHETIC=1\n".into(),
                dependency_manifest: manifest,
                entry_template: "gridforge-workload {entry}".into(),
                origin: DomainOrigin::Store,
            })
            .await?;
        let mut rooms: Vec<&str> = self.spec.clients.iter().filter_map(|c| c.room.as_deref()).collect();
        rooms.sort();
        rooms.dedup();
        for room in rooms.into_iter().filter(|r| *r != PUBLIC_ROOM) {
            self.admin()
                .create_room(&CreateRoom {
                    name: room.into(),
                    visibility: Visibility::Public,
                    members: Vec::new(),
                })
                .await?;
        }
        Ok(())
    }

    async fn spawn_node(&mut self, i: usize) -> Result<(), HarnessError> {
        let c = self.spec.clients[i].clone();
        let name = c.name.clone().unwrap_or_else(|| format!("client{}", i + 1));
        let k = self.spec.time_compression;
        let exec = Arc::new(
            SandboxExecutor::new(self.dir.path().join("exec").join(&name), Duration::from_millis(500))
                .map_err(spawn_err)?,
        );
        let sampler = Arc::new(ScriptedSampler::new(c.cpu_pct));
        let listener = TcpListener::bind("127.0.0.1:0").await.map_err(spawn_err)?;
        let addr = listener.local_addr().map_err(spawn_err)?;
        let base = ClientConfig::default();
        let cfg = AgentConfig {
            manager_url: self.url(),
            token: AGENT_TOKEN.into(),
            agent_id: name.clone(),
            listen: addr,
            advertise: Some(addr.to_string()),
            workdir: self.dir.path().join("agents").join(&name),
            has_gpu: c.has_gpu,
            cores: 4,
            ram_mb: c.ram_mb,
            client: ClientConfig {
                max_concurrent_runs: c.slots,
                cpu_refusal_threshold_pct: c.cpu_refusal_threshold_pct,
                interactive_allocation_pct: c.interactive_allocation_pct,
                allow_remote_restart: c.allow_remote_restart,
                heartbeat_interval_s: base.heartbeat_interval_s / k,
                cancellation_poll_interval_s: base.cancellation_poll_interval_s / k,
            },
            max_restarts: self.spec.max_restarts,
            kill_grace_s: 0.5,
            barrier_poll_s: 1.0 / k,
            exec_poll_s: 0.02,
            request_timeout_s: 10.0,
            run_env: vec![(SPEED_ENV.into(), c.speed.to_string())],
            ..AgentConfig::default()
        };
        let handle = gridforge_agent::start(cfg.clone(), exec.clone(), sampler.clone(), self.sink(), listener)
            .await
            .map_err(spawn_err)?;
        let client_id = handle
            .agent()
            .client_id()
            .ok_or_else(|| spawn_err(format!("{name} did not register")))?;
        let room = c.room.as_deref().unwrap_or(PUBLIC_ROOM);
        let room_id = self
            .admin()
            .rooms()
            .await?
            .into_iter()
            .find(|r| r.name == room)
            .map(|r| r.room_id)
            .ok_or_else(|| spawn_err(format!("room {room} missing")))?;
        self.admin().assign_client(room_id, client_id).await?;
        self.nodes.push(Node {
            name,
            client_id,
            sampler,
            exec,
            cfg,
            addr,
            handle: Some(handle),
            state: NodeState::Up,
        });
        Ok(())
    }

    fn sink(&self) -> SharedSink {
        self.collector.clone()
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.manager_addr)
    }

    pub fn workdir(&self) -> &Path {
        self.dir.path()
    }

    pub fn admin(&self) -> ApiClient {
        ApiClient::new(&self.url(), ADMIN_TOKEN)
    }

    pub fn user(&self, name: &str) -> ApiClient {
        ApiClient::new(&self.url(), &format!("{name}-token"))
    }

    pub fn collector(&self) -> &Arc<Collector> {
        &self.collector
    }

    pub fn trace(&self) -> Trace {
        self.collector.snapshot()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn manager(&self) -> Option<&Manager> {
        self.manager.as_ref().map(|h| h.manager())
    }

    /// Records a harness-side fault in the trace.
    fn note(&self, description: String) {
        tracing::info!("{description}");
        self.collector.emit("harness", TraceEvent::Fault { description });
    }

    fn check_target(&self, i: usize) -> Result<(), HarnessError> {
        if i < self.nodes.len() {
            Ok(())
        } else {
            Err(HarnessError::Script(format!("no client with index {i}")))
        }
    }

    /// The agent stops answering and cannot reach the manager; its
    /// executions keep running.
    pub fn disconnect(&mut self, i: usize) -> Result<(), HarnessError> {
        self.check_target(i)?;
        let node = &mut self.nodes[i];
        if let Some(h) = &node.handle {
            h.agent().gate().set_online(false);
        }
        node.state = NodeState::Disconnected;
        let name = node.name.clone();
        self.note(format!("disconnect {name}"));
        Ok(())
    }

    /// The agent process dies. Executions it started survive in the
    /// executor, as processes outlive a crashed supervisor.
    pub fn crash(&mut self, i: usize) -> Result<(), HarnessError> {
        self.check_target(i)?;
        let node = &mut self.nodes[i];
        if let Some(h) = node.handle.take() {
            h.crash();
        }
        node.state = NodeState::Crashed;
        let name = node.name.clone();
        self.hooks.crashed.lock().insert(name.clone());
        self.note(format!("crash {name}"));
        Ok(())
    }

    /// Undoes a disconnect, or starts a fresh agent over a crashed one's
    /// workdir and executor.
    pub async fn revive(&mut self, i: usize) -> Result<(), HarnessError> {
        self.check_target(i)?;
        match self.nodes[i].state {
            NodeState::Up => return Ok(()),
            NodeState::Disconnected => {
                if let Some(h) = &self.nodes[i].handle {
                    h.agent().gate().set_online(true);
                }
            }
            NodeState::Crashed => {
                let listener = bind_retrying(self.nodes[i].addr).await.map_err(spawn_err)?;
                let node = &self.nodes[i];
                let exec: Arc<dyn Executor> = node.exec.clone();
                let handle = gridforge_agent::start(node.cfg.clone(), exec, node.sampler.clone(), self.sink(), listener)
                    .await
                    .map_err(spawn_err)?;
                self.hooks.crashed.lock().remove(&self.nodes[i].name);
                self.nodes[i].handle = Some(handle);
            }
        }
        self.nodes[i].state = NodeState::Up;
        let name = self.nodes[i].name.clone();
        self.note(format!("revive {name}"));
        Ok(())
    }

    pub fn set_cpu_load(&mut self, i: usize, pct: f64) -> Result<(), HarnessError> {
        self.check_target(i)?;
        self.nodes[i].sampler.set_cpu(pct);
        let name = self.nodes[i].name.clone();
        self.note(format!("cpu load {pct} on {name}"));
        Ok(())
    }

    pub fn set_user_login(&mut self, i: usize, present: bool) -> Result<(), HarnessError> {
        self.check_target(i)?;
        self.nodes[i].sampler.set_interactive(present);
        let name = self.nodes[i].name.clone();
        self.note(format!("{} {name}", if present { "user login on" } else { "user logout on" }));
        Ok(())
    }

    /// Runs one status tick on the agent right away instead of waiting for
    /// its period.
    pub async fn heartbeat_now(&self, i: usize) {
        if let Some(h) = &self.nodes[i].handle {
            h.agent().status_tick().await;
        }
    }

    /// Kills the manager abruptly, waits `down`, and starts a new one on
    /// the same address and state directory.
    pub async fn restart_manager(&mut self, down: Duration) -> Result<(), HarnessError> {
        self.note(format!("manager restart ({} ms down)", down.as_millis()));
        if let Some(h) = self.manager.take() {
            h.kill();
        }
        tokio::time::sleep(down).await;
        let listener = bind_retrying(self.manager_addr).await.map_err(spawn_err)?;
        let m = Manager::open(self.mcfg.clone(), self.sink(), self.hooks.clone()).map_err(spawn_err)?;
        self.manager = Some(serve(m, listener).await.map_err(spawn_err)?);
        Ok(())
    }

    /// Restarts agents the manager asked for through its restart hook.
    pub async fn pump_restarts(&mut self) -> Result<(), HarnessError> {
        while let Ok(agent_id) = self.restart_rx.try_recv() {
            if let Some(i) = self.nodes.iter().position(|n| n.name == agent_id) {
                if self.nodes[i].state == NodeState::Crashed {
                    self.revive(i).await?;
                }
            }
        }
        Ok(())
    }

    /// Creates a synthetic-workload process owned by `user`.
    pub async fn install_workload(&self, user: &str, name: &str, job: &Job) -> Result<(), HarnessError> {
        self.user(user)
            .create_process(&CreateProcess {
                name: name.into(),
                payload_kind: PayloadKind::SingleFile,
                payload: job.to_toml().into_bytes(),
                file_name: Some(JOB_FILE.into()),
                entry_command: None,
                domain: Some(SYNTHETIC_DOMAIN.into()),
                entry_file: None,
            })
            .await?;
        Ok(())
    }

    pub async fn upload_file(&self, user: &str, name: &str, bytes: Vec<u8>) -> Result<FileId, HarnessError> {
        Ok(self.user(user).upload_file(name, bytes).await?)
    }

    /// A form for the synthetic domain in the public room.
    pub fn form(process: &str, repetitions: i64) -> RequestForm {
        RequestForm {
            domain: SYNTHETIC_DOMAIN.into(),
            process: process.into(),
            repetitions,
            rooms: vec![PUBLIC_ROOM.into()],
            ..RequestForm::default()
        }
    }

    pub async fn submit(&self, user: &str, form: &RequestForm) -> Result<RequestId, HarnessError> {
        Ok(self.user(user).submit(form).await?)
    }

    /// Final status of `id` as recorded in the trace, once it has one.
    pub fn request_status(&self, id: RequestId) -> Option<RequestStatus> {
        self.collector.scan(0, |records| {
            records.iter().rev().find_map(|r| match &r.event {
                TraceEvent::RequestStatusChanged { request_id, status } if *request_id == id => Some(*status),
                _ => None,
            })
        })
    }

    /// Waits until `id` is terminal, restarting agents on request meanwhile.
    pub async fn wait_request(&mut self, id: RequestId, timeout: Duration) -> Result<RequestStatus, HarnessError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if let Some(s) = self.request_status(id).filter(|s| s.is_terminal()) {
                return Ok(s);
            }
            if tokio::time::Instant::now() > deadline {
                return Err(HarnessError::Timeout {
                    waited: timeout,
                    trace: Box::new(self.trace()),
                });
            }
            self.pump_restarts().await?;
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Stops every agent and the manager and kills leftover executions.
    pub async fn shutdown(mut self) {
        for node in &mut self.nodes {
            if let Some(h) = node.handle.take() {
                h.shutdown(true).await;
            }
        }
        if let Some(m) = self.manager.take() {
            m.shutdown().await;
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for node in &mut self.nodes {
            if let Some(h) = node.handle.take() {
                h.crash();
            }
            node.exec.shutdown();
        }
        if let Some(m) = self.manager.take() {
            m.kill();
        }
    }
}
