use std::collections::HashMap;
use std::future::Future;
use std::net::{SocketAddr, TcpListener as StdListener};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use gridforge_client::{ApiClient, ClientError};
use gridforge_core::archive::{pack_dir, unpack_into};
use gridforge_core::events::{SharedSink, TraceEvent};
use gridforge_core::hash::sha256_hex;
use gridforge_core::store::{FileStore, Store};
use gridforge_core::time::now_ms;
use gridforge_core::wire::{
    AgentPing, AgentRunView, ApiErrorKind, BarrierReply, DispatchEnvelope, DispatchReply,
    Heartbeat, RefuseReason, RegisterClient, ResultReport, RunOutcome, StatusReport,
};
use gridforge_core::{
    render_header_args, ClientId, FileId, OutputBundle, Progress, ResourceSnapshot, RunEvent,
    RunHeader, RunId, RunStatus, CONSOLE_FILE,
};
use gridforge_executor::{ExecError, ExecSpec, ExecState, Executor, ImageRef, Mounts, ResourceLimits, SharedMount};
use parking_lot::Mutex;
use tokio::sync::Mutex as AsyncMutex;
use tokio::task::JoinHandle;

use crate::config::AgentConfig;
use crate::local::{LocalRun, LocalState, PendingResult};
use crate::sampler::Sampler;

/// Simulated network link. While offline the agent neither answers its
/// API nor reaches the manager, but its runs keep executing.
#[derive(Debug)]
pub struct NetworkGate(AtomicBool);

impl Default for NetworkGate {
    fn default() -> Self {
        NetworkGate(AtomicBool::new(true))
    }
}

impl NetworkGate {
    pub fn is_online(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
    pub fn set_online(&self, online: bool) {
        self.0.store(online, Ordering::SeqCst);
    }
}

/// Why a run stopped before producing a result.
#[derive(Debug)]
enum Stop {
    Canceled,
    Failed(String),
    /// The manager no longer attributes the run to this client.
    Superseded,
}

type Slot<T> = Arc<AsyncMutex<Option<T>>>;

pub(crate) struct Inner {
    pub(crate) cfg: AgentConfig,
    pub(crate) address: String,
    source: String,
    exec: Arc<dyn Executor>,
    sampler: Arc<dyn Sampler>,
    sink: SharedSink,
    api: ApiClient,
    pub(crate) gate: Arc<NetworkGate>,
    store: FileStore,
    state: Mutex<LocalState>,
    accepting: AtomicBool,
    snapshot: Mutex<ResourceSnapshot>,
    images: Mutex<HashMap<String, Slot<ImageRef>>>,
    files: Mutex<HashMap<FileId, Slot<PathBuf>>>,
    payloads: Mutex<HashMap<String, Slot<PathBuf>>>,
    ports: Mutex<HashMap<RunId, StdListener>>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    alive: AtomicBool,
}

/// A client agent. Cheap to clone.
#[derive(Clone)]
pub struct Agent {
    pub(crate) inner: Arc<Inner>,
}

fn host_of(address: &str) -> &str {
    address.rsplit_once(':').map(|(h, _)| h).unwrap_or(address)
}

fn detected_ram_mb() -> u64 {
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("MemTotal:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|v| v.parse::<u64>().ok())
        })
        .map(|kb| kb / 1024)
        .unwrap_or(1024)
}

/// Transport failures and server-side errors are worth retrying.
fn retryable(e: &ClientError) -> bool {
    match e {
        ClientError::Transport(_) => true,
        ClientError::Api { status, .. } => *status >= 500,
        ClientError::Decode(_) => false,
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("blocking task panicked")
}

impl Agent {
    /// Opens the agent's local state under `cfg.workdir`. `address` is what
    /// the manager will call.
    pub fn new(
        mut cfg: AgentConfig,
        address: String,
        exec: Arc<dyn Executor>,
        sampler: Arc<dyn Sampler>,
        sink: SharedSink,
    ) -> anyhow::Result<Self> {
        cfg.validate().map_err(anyhow::Error::msg)?;
        if cfg.cores == 0 {
            cfg.cores = std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1);
        }
        if cfg.ram_mb == 0 {
            cfg.ram_mb = detected_ram_mb();
        }
        std::fs::create_dir_all(cfg.workdir.join("runs"))?;
        std::fs::create_dir_all(cfg.workdir.join("cache"))?;
        let store = FileStore::open(cfg.workdir.join("state"))?;
        let state: LocalState = match store.load_state()? {
            Some(bytes) => serde_json::from_slice(&bytes)?,
            None => LocalState::default(),
        };
        let api = ApiClient::with_timeout(
            &cfg.manager_url,
            &cfg.token,
            AgentConfig::secs(cfg.request_timeout_s),
        );
        Ok(Agent {
            inner: Arc::new(Inner {
                source: format!("agent:{}", cfg.agent_id),
                address,
                exec,
                sampler,
                sink,
                api,
                gate: Arc::new(NetworkGate::default()),
                store,
                state: Mutex::new(state),
                accepting: AtomicBool::new(true),
                snapshot: Mutex::new(ResourceSnapshot::default()),
                images: Mutex::new(HashMap::new()),
                files: Mutex::new(HashMap::new()),
                payloads: Mutex::new(HashMap::new()),
                ports: Mutex::new(HashMap::new()),
                tasks: Mutex::new(Vec::new()),
                alive: AtomicBool::new(true),
                cfg,
            }),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.inner.cfg
    }

    pub fn address(&self) -> &str {
        &self.inner.address
    }

    pub fn gate(&self) -> Arc<NetworkGate> {
        self.inner.gate.clone()
    }

    pub fn client_id(&self) -> Option<ClientId> {
        self.inner.state.lock().client_id
    }

    pub fn accepting_new(&self) -> bool {
        self.inner.accepting.load(Ordering::SeqCst)
    }

    fn emit(&self, event: TraceEvent) {
        self.inner.sink.emit(&self.inner.source, event);
    }

    fn persist(&self, state: &LocalState) {
        match serde_json::to_vec(state) {
            Ok(bytes) => {
                if let Err(e) = self.inner.store.save_state(&bytes) {
                    tracing::error!("saving agent state: {e}");
                }
            }
            Err(e) => tracing::error!("encoding agent state: {e}"),
        }
    }

    fn update<R>(&self, f: impl FnOnce(&mut LocalState) -> R) -> R {
        let mut st = self.inner.state.lock();
        let out = f(&mut st);
        self.persist(&st);
        out
    }

    fn update_run(&self, run_id: RunId, f: impl FnOnce(&mut LocalRun)) {
        self.update(|st| {
            if let Some(r) = st.runs.get_mut(&run_id) {
                f(r);
            }
        });
    }

    fn run(&self, run_id: RunId) -> Option<LocalRun> {
        self.inner.state.lock().runs.get(&run_id).cloned()
    }

    /// Calls the manager unless the simulated link is down.
    async fn call<T>(&self, fut: impl Future<Output = Result<T, ClientError>>) -> Result<T, ClientError> {
        if !self.inner.gate.is_online() {
            return Err(ClientError::Transport("network unreachable".into()));
        }
        fut.await
    }

    fn spawn(&self, fut: impl Future<Output = ()> + Send + 'static) {
        let mut tasks = self.inner.tasks.lock();
        tasks.retain(|t| !t.is_finished());
        tasks.push(tokio::spawn(fut));
    }

    /// False once this instance has crashed or shut down.
    pub fn is_alive(&self) -> bool {
        self.inner.alive.load(Ordering::SeqCst)
    }

    /// Aborts every background task of this agent. Executions continue.
    pub(crate) fn abort_tasks(&self) {
        self.inner.alive.store(false, Ordering::SeqCst);
        for t in self.inner.tasks.lock().drain(..) {
            t.abort();
        }
        self.inner.ports.lock().clear();
    }

    /// Kills every execution this agent started.
    pub fn kill_runs(&self) {
        self.inner.exec.shutdown();
    }

    // ----- registration and status -------------------------------------------------

    pub async fn register(&self) -> Result<ClientId, ClientError> {
        let cfg = &self.inner.cfg;
        let body = RegisterClient {
            agent_id: cfg.agent_id.clone(),
            address: self.inner.address.clone(),
            has_gpu: cfg.has_gpu,
            cores: cfg.cores,
            ram_mb: cfg.ram_mb,
            config: cfg.client.clone(),
        };
        let reg = self.call(self.inner.api.register(&body)).await?;
        self.update(|st| st.client_id = Some(reg.client_id));
        Ok(reg.client_id)
    }

    /// Samples the host, decides whether new runs are welcome and reports
    /// to the manager.
    pub async fn status_tick(&self) {
        let snap = match self.inner.sampler.sample() {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!("sampler failed: {e}");
                let mut s = self.inner.snapshot.lock().clone();
                s.stale = true;
                s
            }
        };
        let accepting = snap.cpu_pct < self.inner.cfg.client.cpu_refusal_threshold_pct;
        let (client_id, active_runs) = {
            // Decided under the state lock so no dispatch is acked after a
            // refusing heartbeat has been announced.
            let st = self.inner.state.lock();
            self.inner.accepting.store(accepting, Ordering::SeqCst);
            *self.inner.snapshot.lock() = snap.clone();
            self.emit(TraceEvent::AgentHeartbeat {
                client_id: st.client_id,
                accepting_new: accepting,
                cpu_pct: snap.cpu_pct,
                interactive: snap.interactive_user_present,
            });
            let active: Vec<RunId> = st
                .runs
                .iter()
                .filter(|(_, r)| r.occupies_slot())
                .map(|(id, _)| *id)
                .collect();
            (st.client_id, active)
        };
        let client_id = match client_id {
            Some(c) => c,
            None => match self.register().await {
                Ok(c) => c,
                Err(_) => return,
            },
        };
        let hb = Heartbeat {
            snapshot: snap,
            accepting_new: accepting,
            active_runs,
        };
        match self.call(self.inner.api.heartbeat(client_id, &hb)).await {
            Ok(ack) if !ack.known => {
                let _ = self.register().await;
            }
            Ok(_) => {}
            Err(e) => tracing::debug!("heartbeat failed: {e}"),
        }
    }

    /// Kills runs the manager has canceled, then acknowledges the notices.
    pub async fn cancellation_poll(&self) {
        let Some(client_id) = self.client_id() else {
            return;
        };
        let Ok(list) = self.call(self.inner.api.cancellations(client_id)).await else {
            return;
        };
        if list.run_ids.is_empty() {
            return;
        }
        for run_id in &list.run_ids {
            self.cancel_local(*run_id);
        }
        let _ = self
            .call(self.inner.api.ack_cancellations(client_id, &list))
            .await;
    }

    fn cancel_local(&self, run_id: RunId) {
        let handle = {
            let mut st = self.inner.state.lock();
            let Some(run) = st.runs.get_mut(&run_id) else {
                return;
            };
            if run.status.is_terminal() {
                return;
            }
            run.cancel_requested = true;
            let h = run.handle.clone();
            self.persist(&st);
            h
        };
        if let Some(h) = handle {
            let exec = self.inner.exec.clone();
            tokio::task::spawn_blocking(move || {
                let _ = exec.kill(&h);
            });
        }
    }

    // ----- dispatch -----------------------------------------------------------------

    pub fn accept_run(&self, env: DispatchEnvelope) -> DispatchReply {
        let run_id = env.run_id;
        let refuse = |reason: RefuseReason, detail: String, client_id| {
            self.emit(TraceEvent::AgentRefused {
                client_id,
                run_id,
                reason: format!("{reason:?}"),
            });
            DispatchReply::Refuse { reason, detail }
        };
        let mut st = self.inner.state.lock();
        if let Some(r) = st.runs.get(&run_id) {
            return DispatchReply::Ack {
                run_id,
                rendezvous_port: r.rendezvous_port,
            };
        }
        let client_id = st.client_id;
        if env.rank >= env.repetitions {
            return refuse(RefuseReason::Invalid, format!("rank {} of {}", env.rank, env.repetitions), client_id);
        }
        if shlex_split(&env.process.entry_command).is_none() {
            return refuse(RefuseReason::Invalid, "unparseable entry command".into(), client_id);
        }
        if !self.inner.accepting.load(Ordering::SeqCst) {
            return refuse(RefuseReason::Threshold, "cpu above refusal threshold".into(), client_id);
        }
        let slots = self.inner.cfg.client.max_concurrent_runs as usize;
        if st.active() >= slots {
            return refuse(RefuseReason::Capacity, format!("{slots} slots in use"), client_id);
        }
        let rendezvous_port = if env.parallel && env.rank == 0 {
            match StdListener::bind(SocketAddr::from(([0, 0, 0, 0], 0))) {
                Ok(l) => {
                    let port = l.local_addr().map(|a| a.port()).unwrap_or(0);
                    self.inner.ports.lock().insert(run_id, l);
                    Some(port)
                }
                Err(e) => return refuse(RefuseReason::Unavailable, format!("no free port: {e}"), client_id),
            }
        } else {
            None
        };
        let (request_id, rank) = (env.request_id, env.rank);
        st.runs.insert(
            run_id,
            LocalRun {
                envelope: env,
                status: RunStatus::Distributed,
                dir: self.inner.cfg.workdir.join("runs").join(run_id.to_string()),
                rendezvous_port,
                spec: None,
                handle: None,
                restarts: 0,
                exit_code: None,
                cancel_requested: false,
                result: None,
                delivered: false,
                accepted_at: now_ms(),
            },
        );
        self.persist(&st);
        self.emit(TraceEvent::AgentAccepted {
            client_id,
            run_id,
            request_id,
            rank,
        });
        drop(st);
        let me = self.clone();
        self.spawn(async move { me.supervise(run_id).await });
        DispatchReply::Ack {
            run_id,
            rendezvous_port,
        }
    }

    pub fn ping(&self) -> AgentPing {
        let st = self.inner.state.lock();
        AgentPing {
            agent_id: self.inner.cfg.agent_id.clone(),
            client_id: st.client_id,
            active_runs: st.active() as u32,
        }
    }

    pub fn run_views(&self) -> Vec<AgentRunView> {
        self.inner
            .state
            .lock()
            .runs
            .values()
            .map(|r| AgentRunView {
                run_id: r.envelope.run_id,
                request_id: r.envelope.request_id,
                rank: r.envelope.rank,
                attempt: r.envelope.attempt,
                local_status: r.status,
                exit_code: r.exit_code,
                restarts: r.restarts,
            })
            .collect()
    }

    pub fn run_view(&self, run_id: RunId) -> Option<AgentRunView> {
        self.run_views().into_iter().find(|v| v.run_id == run_id)
    }

    /// Forwards a progress event from user code to the manager.
    pub fn forward_progress(&self, run_id: RunId, progress: Progress) -> bool {
        let Some(client_id) = self.client_id() else {
            return false;
        };
        if self.run(run_id).is_none_or(|r| r.status.is_terminal()) {
            return false;
        }
        let me = self.clone();
        tokio::spawn(async move {
            let _ = me
                .call(me.inner.api.report_progress(client_id, run_id, &progress))
                .await;
        });
        true
    }

    // ----- run supervision ------------------------------------------------------------

    async fn supervise(&self, run_id: RunId) {
        let outcome = match self.prepare(run_id).await {
            Ok(spec) => match self.launch(run_id, spec, false).await {
                Ok(()) => self.monitor(run_id).await,
                Err(stop) => Err(stop),
            },
            Err(stop) => Err(stop),
        };
        self.finish(run_id, outcome).await;
    }

    fn check_cancel(&self, run_id: RunId) -> Result<(), Stop> {
        match self.run(run_id) {
            Some(r) if !r.cancel_requested => Ok(()),
            _ => Err(Stop::Canceled),
        }
    }

    async fn report(&self, run_id: RunId, event: RunEvent, obs: Option<String>) -> Result<(), Stop> {
        let Some(client_id) = self.client_id() else {
            return Ok(());
        };
        let body = StatusReport { event, obs };
        for attempt in 0..5u32 {
            match self.call(self.inner.api.report_status(client_id, run_id, &body)).await {
                Ok(_) => return Ok(()),
                Err(e) if e.kind() == Some(ApiErrorKind::StaleAttempt) => return Err(Stop::Superseded),
                Err(e) if retryable(&e) => {
                    tokio::time::sleep(Duration::from_millis(100 << attempt.min(4))).await;
                }
                Err(e) => {
                    tracing::debug!(%run_id, "status report rejected: {e}");
                    return Ok(());
                }
            }
        }
        // The manager reconciles from our run list when it is back.
        Ok(())
    }

    async fn prepare(&self, run_id: RunId) -> Result<ExecSpec, Stop> {
        let run = self.run(run_id).ok_or(Stop::Canceled)?;
        let env = run.envelope.clone();
        let dir = run.dir.clone();
        let mounts_dirs = (dir.join("app"), dir.join("checkpoint"), dir.join("output"));
        {
            let (app, ck, out) = mounts_dirs.clone();
            blocking(move || -> std::io::Result<()> {
                for d in [&app, &ck, &out] {
                    std::fs::create_dir_all(d)?;
                }
                std::fs::OpenOptions::new().create(true).append(true).open(out.join(CONSOLE_FILE))?;
                Ok(())
            })
            .await
            .map_err(|e| Stop::Failed(format!("Failed: preparing workdir: {e}")))?;
        }

        let image = self.ensure_image(run_id, &env).await?;
        self.check_cancel(run_id)?;
        let payload = self.ensure_payload(&env).await?;
        {
            let app = mounts_dirs.0.clone();
            blocking(move || -> std::io::Result<()> {
                let bytes = std::fs::read(&payload)?;
                unpack_into(&bytes, &app).map(|_| ())
            })
            .await
            .map_err(|e| Stop::Failed(format!("Failed: unpacking payload: {e}")))?;
        }
        let shared = self.ensure_files(&env).await?;
        self.check_cancel(run_id)?;

        let (master_addr, master_port) = if env.parallel {
            self.update_run(run_id, |r| r.status = RunStatus::WaitingBarrier);
            self.report(run_id, RunEvent::BarrierWait, None).await?;
            self.wait_barrier(run_id).await?
        } else {
            (host_of(&self.inner.address).to_string(), 0)
        };

        let mounts = Mounts {
            app_dir: mounts_dirs.0,
            checkpoint_dir: mounts_dirs.1,
            output_dir: mounts_dirs.2,
            shared,
        };
        let guest = self.inner.exec.guest_dirs(&mounts);
        let header = RunHeader {
            app_dir: guest.app_dir,
            checkpoint_dir: guest.checkpoint_dir,
            output_dir: guest.output_dir,
            rank: env.rank,
            repetitions: env.repetitions,
            master_addr,
            master_port,
            parameters: env.parameters.clone(),
        };
        header.validate().map_err(|e| Stop::Failed(format!("Failed: {e}")))?;
        let entry_command = shlex_split(&env.process.entry_command)
            .ok_or_else(|| Stop::Failed("Failed: unparseable entry command".into()))?;
        let mut run_env = self.inner.cfg.run_env.clone();
        run_env.push((
            "GRIDFORGE_PROGRESS_URL".into(),
            format!("http://{}/agent/v1/runs/{run_id}/progress", self.inner.address),
        ));
        run_env.push(("GRIDFORGE_RUN_ID".into(), run_id.to_string()));
        Ok(ExecSpec {
            image,
            entry_command,
            args: render_header_args(&header),
            mounts,
            limits: self.current_limits(env.needs_gpu),
            rendezvous_port: run.rendezvous_port,
            env: run_env,
        })
    }

    /// Full machine when nobody is logged in, otherwise the interactive
    /// allocation.
    fn current_limits(&self, gpu: bool) -> ResourceLimits {
        let interactive = self.inner.snapshot.lock().interactive_user_present;
        let cfg = &self.inner.cfg;
        if interactive {
            let pct = cfg.client.interactive_allocation_pct;
            ResourceLimits {
                cpu_share_pct: pct,
                memory_mb: ((cfg.ram_mb as f64) * pct / 100.0).round() as u64,
                gpu,
            }
        } else {
            ResourceLimits {
                cpu_share_pct: 100.0,
                memory_mb: 0,
                gpu,
            }
        }
    }

    async fn wait_barrier(&self, run_id: RunId) -> Result<(String, u16), Stop> {
        let period = AgentConfig::secs(self.inner.cfg.barrier_poll_s);
        loop {
            self.check_cancel(run_id)?;
            if let Some(client_id) = self.client_id() {
                match self.call(self.inner.api.barrier(client_id, run_id)).await {
                    Ok(BarrierReply::Release {
                        master_addr,
                        master_port,
                    }) => return Ok((master_addr, master_port)),
                    Ok(BarrierReply::Abort) => return Err(Stop::Canceled),
                    Ok(BarrierReply::Hold) => {}
                    Err(e) if e.kind() == Some(ApiErrorKind::StaleAttempt) => return Err(Stop::Superseded),
                    Err(e) if retryable(&e) => {}
                    Err(e) => return Err(Stop::Failed(format!("Failed: barrier: {e}"))),
                }
            }
            tokio::time::sleep(period).await;
        }
    }

    async fn ensure_image(&self, run_id: RunId, env: &DispatchEnvelope) -> Result<ImageRef, Stop> {
        let hash = env.domain.content_hash.clone();
        let slot = self.inner.images.lock().entry(hash.clone()).or_default().clone();
        let mut slot = slot.lock().await;
        if let Some(img) = slot.as_ref() {
            return Ok(img.clone());
        }
        let client_id = self.client_id().ok_or(Stop::Canceled)?;
        let spec = self
            .retrying(|| self.inner.api.domain_spec(client_id, env.domain.domain_id))
            .await
            .map_err(|e| Stop::Failed(format!("Failed: fetching domain: {e}")))?;
        self.update_run(run_id, |r| {
            if r.status == RunStatus::Distributed {
                r.status = RunStatus::Building;
            }
        });
        self.report(run_id, RunEvent::BuildStarted, None).await?;
        self.emit(TraceEvent::BuildStarted {
            client_id: Some(client_id),
            content_hash: spec.content_hash.clone(),
        });
        let exec = self.inner.exec.clone();
        let (recipe, manifest) = (spec.build_recipe.clone(), spec.dependency_manifest.clone());
        let built = blocking(move || exec.build(&recipe, &manifest)).await;
        self.emit(TraceEvent::BuildFinished {
            client_id: Some(client_id),
            content_hash: spec.content_hash.clone(),
            ok: built.is_ok(),
        });
        match built {
            Ok(img) => {
                *slot = Some(img.clone());
                Ok(img)
            }
            Err(ExecError::BuildFailed { log }) => Err(Stop::Failed(format!("Failed: build failed\n{log}"))),
            Err(e) => Err(Stop::Failed(format!("Failed: build failed: {e}"))),
        }
    }

    async fn ensure_payload(&self, env: &DispatchEnvelope) -> Result<PathBuf, Stop> {
        let hash = env.process.payload_hash.clone();
        let slot = self.inner.payloads.lock().entry(hash.clone()).or_default().clone();
        let mut slot = slot.lock().await;
        if let Some(p) = slot.as_ref() {
            return Ok(p.clone());
        }
        let path = self.inner.cfg.workdir.join("cache").join(format!("payload-{hash}.tar.gz"));
        if !path.is_file() {
            let client_id = self.client_id().ok_or(Stop::Canceled)?;
            let bytes = self
                .retrying(|| self.inner.api.fetch_payload(client_id, env.process.process_id))
                .await
                .map_err(|e| Stop::Failed(format!("Failed: fetching payload: {e}")))?;
            if sha256_hex(&bytes) != hash {
                return Err(Stop::Failed("Failed: payload hash mismatch".into()));
            }
            write_readonly(&path, &bytes).map_err(|e| Stop::Failed(format!("Failed: caching payload: {e}")))?;
        }
        *slot = Some(path.clone());
        Ok(path)
    }

    async fn ensure_files(&self, env: &DispatchEnvelope) -> Result<Vec<SharedMount>, Stop> {
        let mut mounts = Vec::new();
        for f in &env.shared_files {
            let slot = self.inner.files.lock().entry(f.file_id).or_default().clone();
            let mut slot = slot.lock().await;
            let path = match slot.as_ref() {
                Some(p) => p.clone(),
                None => {
                    let path = self.inner.cfg.workdir.join("cache").join(format!("file-{}", f.file_id));
                    let cached = std::fs::read(&path).is_ok_and(|b| sha256_hex(&b) == f.content_hash);
                    if !cached {
                        let client_id = self.client_id().ok_or(Stop::Canceled)?;
                        let bytes = self
                            .retrying(|| self.inner.api.fetch_file(client_id, f.file_id))
                            .await
                            .map_err(|e| Stop::Failed(format!("Failed: fetching shared file {}: {e}", f.name)))?;
                        write_readonly(&path, &bytes)
                            .map_err(|e| Stop::Failed(format!("Failed: caching {}: {e}", f.name)))?;
                    }
                    *slot = Some(path.clone());
                    path
                }
            };
            mounts.push(SharedMount {
                host_path: path,
                name: f.name.clone(),
            });
        }
        Ok(mounts)
    }

    /// Retries transport failures with backoff, a bounded number of times.
    async fn retrying<T, F, Fut>(&self, mut f: F) -> Result<T, ClientError>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, ClientError>>,
    {
        let mut last = None;
        for attempt in 0..6u32 {
            match self.call(f()).await {
                Ok(v) => return Ok(v),
                Err(e) if retryable(&e) => {
                    last = Some(e);
                    tokio::time::sleep(Duration::from_millis(100 << attempt)).await;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    async fn launch(&self, run_id: RunId, spec: ExecSpec, restart: bool) -> Result<(), Stop> {
        self.check_cancel(run_id)?;
        if !restart {
            // Hand the reserved port over to user code.
            self.inner.ports.lock().remove(&run_id);
        }
        let exec = self.inner.exec.clone();
        let to_start = spec.clone();
        let handle = blocking(move || exec.start(&to_start))
            .await
            .map_err(|e| Stop::Failed(format!("Failed: could not start: {e}")))?;
        let mut restarts = 0;
        let mut canceled = false;
        self.update_run(run_id, |r| {
            r.status = RunStatus::Running;
            r.handle = Some(handle.id.clone());
            r.spec = Some(spec.clone());
            restarts = r.restarts;
            canceled = r.cancel_requested;
        });
        if canceled {
            // Raced with a cancellation that found no handle yet.
            let exec = self.inner.exec.clone();
            let id = handle.id.clone();
            blocking(move || exec.kill(&id)).await.ok();
        }
        let header = gridforge_core::parse_header_args(&spec.args).ok();
        self.emit(TraceEvent::ExecLaunched {
            client_id: self.client_id(),
            run_id,
            rank: header.as_ref().map(|h| h.rank).unwrap_or_default(),
            cpu_share_pct: spec.limits.cpu_share_pct,
            memory_mb: spec.limits.memory_mb,
            restart: restarts,
            master_addr: header.as_ref().map(|h| h.master_addr.clone()).unwrap_or_default(),
            master_port: header.as_ref().map(|h| h.master_port).unwrap_or_default(),
        });
        if !restart {
            self.report(run_id, RunEvent::Started, None).await?;
        }
        Ok(())
    }

    /// Polls the execution to its end, relaunching abnormal exits up to
    /// the restart bound with the same header.
    async fn monitor(&self, run_id: RunId) -> Result<(RunOutcome, Option<i32>, String), Stop> {
        let period = AgentConfig::secs(self.inner.cfg.exec_poll_s);
        loop {
            tokio::time::sleep(period).await;
            let run = self.run(run_id).ok_or(Stop::Canceled)?;
            let handle = run.handle.clone().ok_or(Stop::Canceled)?;
            let state = match self.inner.exec.status(&handle) {
                Ok(h) => h.state,
                Err(_) => {
                    return Ok((RunOutcome::Lost, None, "Orphaned: execution lost by client".into()));
                }
            };
            let code = match state {
                ExecState::Starting | ExecState::Running => continue,
                ExecState::Killed => None,
                ExecState::Exited(c) => Some(c),
            };
            self.emit(TraceEvent::ExecExited {
                client_id: self.client_id(),
                run_id,
                exit_code: code,
                killed: code.is_none(),
            });
            self.update_run(run_id, |r| r.exit_code = code);
            if run.cancel_requested {
                return Err(Stop::Canceled);
            }
            match code {
                Some(0) => return Ok((RunOutcome::Succeeded, Some(0), "Success".into())),
                _ if run.restarts < self.inner.cfg.max_restarts => {
                    let spec = run.spec.clone().ok_or_else(|| Stop::Failed("Failed: no launch spec".into()))?;
                    self.update_run(run_id, |r| r.restarts += 1);
                    self.launch(run_id, spec, true).await?;
                }
                Some(c) => {
                    let obs = format!(
                        "Failed: exit code {c} after {} restarts",
                        run.restarts
                    );
                    return Ok((RunOutcome::Failed, Some(c), obs));
                }
                None => {
                    return Ok((RunOutcome::Failed, None, "Failed: killed".into()));
                }
            }
        }
    }

    async fn finish(&self, run_id: RunId, outcome: Result<(RunOutcome, Option<i32>, String), Stop>) {
        self.inner.ports.lock().remove(&run_id);
        let (outcome, exit_code, obs) = match outcome {
            Ok(o) => o,
            Err(Stop::Failed(obs)) => (RunOutcome::Failed, None, obs),
            Err(Stop::Canceled) | Err(Stop::Superseded) => {
                if let Some(h) = self.run(run_id).and_then(|r| r.handle) {
                    let exec = self.inner.exec.clone();
                    blocking(move || exec.kill(&h)).await.ok();
                }
                self.update_run(run_id, |r| {
                    r.status = RunStatus::Canceled;
                    r.delivered = true;
                });
                return;
            }
        };
        let Some(run) = self.run(run_id) else {
            return;
        };
        let has_bundle = matches!(outcome, RunOutcome::Succeeded | RunOutcome::Failed);
        if has_bundle {
            let out = run.dir.join("output");
            let packed = blocking(move || -> std::io::Result<(Vec<u8>, Vec<u8>)> {
                let console = std::fs::read(out.join(CONSOLE_FILE)).unwrap_or_default();
                Ok((pack_dir(&out)?, console))
            })
            .await;
            match packed {
                Ok((archive, console)) => {
                    let stored = self
                        .inner
                        .store
                        .put_blob(&format!("bundle/{run_id}.tar.gz"), &archive)
                        .and_then(|_| self.inner.store.put_blob(&format!("bundle/{run_id}.console"), &console));
                    if let Err(e) = stored {
                        tracing::error!(%run_id, "storing bundle: {e}");
                    }
                }
                Err(e) => tracing::error!(%run_id, "packing output: {e}"),
            }
        }
        let status = match outcome {
            RunOutcome::Succeeded => RunStatus::Success,
            RunOutcome::Failed => RunStatus::Failed,
            RunOutcome::Canceled => RunStatus::Canceled,
            RunOutcome::Lost => RunStatus::Orphaned,
        };
        self.update_run(run_id, |r| {
            r.status = status;
            r.result = Some(PendingResult {
                outcome,
                exit_code,
                obs,
                has_bundle,
            });
        });
        self.deliver(run_id).await;
    }

    /// Posts the pending result until the manager takes it or rejects it.
    async fn deliver(&self, run_id: RunId) {
        let mut backoff = Duration::from_millis(100);
        loop {
            let Some(run) = self.run(run_id) else {
                return;
            };
            let Some(pending) = run.result.clone() else {
                return;
            };
            if run.delivered {
                return;
            }
            let bundle = if pending.has_bundle {
                let archive = self.inner.store.get_blob(&format!("bundle/{run_id}.tar.gz")).ok().flatten();
                let console = self.inner.store.get_blob(&format!("bundle/{run_id}.console")).ok().flatten();
                archive.map(|archive| OutputBundle {
                    run_id,
                    archive,
                    console_log: console.unwrap_or_default(),
                })
            } else {
                None
            };
            let report = ResultReport {
                outcome: pending.outcome,
                exit_code: pending.exit_code,
                obs: pending.obs.clone(),
                bundle,
            };
            let result = match self.client_id() {
                Some(c) => self.call(self.inner.api.report_result(c, run_id, &report)).await,
                None => Err(ClientError::Transport("not registered".into())),
            };
            match result {
                Err(e) if retryable(&e) => {
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(Duration::from_secs(2));
                }
                other => {
                    if let Err(e) = other {
                        tracing::debug!(%run_id, "result not taken: {e}");
                    }
                    self.update_run(run_id, |r| r.delivered = true);
                    let dir = run.dir.join("app");
                    tokio::task::spawn_blocking(move || std::fs::remove_dir_all(dir));
                    return;
                }
            }
        }
    }

    /// Picks up runs from a previous life of this agent: finished results
    /// are delivered, live executions re-adopted, anything else reported
    /// lost so the manager reschedules it.
    pub fn recover(&self) {
        let runs: Vec<LocalRun> = self.inner.state.lock().runs.values().cloned().collect();
        for run in runs {
            let run_id = run.envelope.run_id;
            if run.delivered {
                continue;
            }
            let me = self.clone();
            if run.result.is_some() {
                self.spawn(async move { me.deliver(run_id).await });
                continue;
            }
            let live = run
                .handle
                .as_ref()
                .is_some_and(|h| self.inner.exec.status(h).is_ok());
            if live && run.spec.is_some() {
                self.spawn(async move {
                    let outcome = me.monitor(run_id).await;
                    me.finish(run_id, outcome).await;
                });
            } else if run.cancel_requested {
                self.update_run(run_id, |r| {
                    r.status = RunStatus::Canceled;
                    r.delivered = true;
                });
            } else {
                self.spawn(async move {
                    me.finish(
                        run_id,
                        Ok((RunOutcome::Lost, None, "Orphaned: agent restarted".into())),
                    )
                    .await
                });
            }
        }
    }

    pub(crate) fn start_loops(&self) {
        let me = self.clone();
        let period = AgentConfig::secs(self.inner.cfg.client.heartbeat_interval_s);
        self.spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                me.status_tick().await;
            }
        });
        let me = self.clone();
        let period = AgentConfig::secs(self.inner.cfg.client.cancellation_poll_interval_s);
        self.spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                me.cancellation_poll().await;
            }
        });
    }

    pub fn workdir(&self) -> &Path {
        &self.inner.cfg.workdir
    }
}

fn shlex_split(cmd: &str) -> Option<Vec<String>> {
    shlex::split(cmd).filter(|v| !v.is_empty())
}

/// Writes `bytes` to `path` atomically and drops write permission.
fn write_readonly(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, bytes)?;
    std::fs::set_permissions(&tmp, std::fs::Permissions::from_mode(0o444))?;
    std::fs::rename(&tmp, path)
}
