//! The gridforge client agent.
//!
//! An agent registers with the manager, reports host load, accepts or
//! refuses dispatched runs, builds and caches images, fetches payloads and
//! shared files once per content, supervises executions and delivers
//! output bundles. Its run records are persisted so a restarted agent can
//! deliver results produced before it went down.

mod agent;
pub mod api;
pub mod config;
pub mod local;
pub mod sampler;

use std::sync::Arc;

use gridforge_core::events::SharedSink;
use gridforge_executor::Executor;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use agent::{Agent, NetworkGate};
pub use config::{AgentConfig, Backend};
pub use local::{LocalRun, LocalState, PendingResult};
pub use sampler::{ProcSampler, Sampler, ScriptedSampler};

/// A running agent bound to a listener.
pub struct AgentHandle {
    pub addr: std::net::SocketAddr,
    agent: Agent,
    stop_tx: Option<oneshot::Sender<()>>,
    server: JoinHandle<()>,
}

/// Opens the agent's state, serves its API on `listener`, registers and
/// starts the status and cancellation loops.
pub async fn start(
    cfg: AgentConfig,
    exec: Arc<dyn Executor>,
    sampler: Arc<dyn Sampler>,
    sink: SharedSink,
    listener: TcpListener,
) -> anyhow::Result<AgentHandle> {
    let addr = listener.local_addr()?;
    let address = cfg.advertise.clone().unwrap_or_else(|| {
        if addr.ip().is_unspecified() {
            format!("127.0.0.1:{}", addr.port())
        } else {
            addr.to_string()
        }
    });
    let agent = Agent::new(cfg, address, exec, sampler, sink)?;
    let app = api::router(agent.clone());
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let shutdown = async {
            let _ = stop_rx.await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!("agent server error: {e}");
        }
    });
    // A sample before registering so the first heartbeat is meaningful.
    agent.status_tick().await;
    agent.recover();
    agent.start_loops();
    Ok(AgentHandle {
        addr,
        agent,
        stop_tx: Some(stop_tx),
        server,
    })
}

impl AgentHandle {
    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    /// Abrupt stop of the agent process. Executions it started keep
    /// running in the executor; a new agent on the same workdir and
    /// executor picks them up.
    pub fn crash(self) {
        self.agent.abort_tasks();
        self.server.abort();
    }

    /// Orderly stop; optionally kills every execution first.
    pub async fn shutdown(mut self, kill_runs: bool) {
        if kill_runs {
            let agent = self.agent.clone();
            let _ = tokio::task::spawn_blocking(move || agent.kill_runs()).await;
        }
        self.agent.abort_tasks();
        if let Some(tx) = self.stop_tx.take() {
            let _ = tx.send(());
        }
        if tokio::time::timeout(std::time::Duration::from_secs(5), &mut self.server).await.is_err() {
            self.server.abort();
        }
    }
}
