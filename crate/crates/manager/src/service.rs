//! The running manager: shared state behind a lock, the three periodic
//! monitors and the HTTP server lifecycle.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use gridforge_client::AgentClient;
use gridforge_core::events::{SharedSink, TraceEvent};
use gridforge_core::time::now_ms;
use gridforge_core::ClientNode;
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Notify};
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;

use crate::auth::TokenTable;
use crate::config::ManagerConfig;
use crate::error::{ManagerError, Result};
use crate::state::State;
use crate::store::{FileStore, MemoryStore, Store};

/// Out-of-band control over client machines, used when an agent stops
/// answering but its host might still be up.
pub trait ClientHooks: Send + Sync {
    fn host_reachable(&self, _client: &ClientNode) -> bool {
        false
    }
    fn restart_agent(&self, _client: &ClientNode) {}
}

pub struct NoHooks;
impl ClientHooks for NoHooks {}

struct Inner {
    state: Mutex<State>,
    cfg: ManagerConfig,
    tokens: TokenTable,
    pinger: AgentClient,
    dispatcher: AgentClient,
    hooks: Arc<dyn ClientHooks>,
    sink: SharedSink,
    stopped: AtomicBool,
    wake: Notify,
}

#[derive(Clone)]
pub struct Manager {
    inner: Arc<Inner>,
}

impl Manager {
    /// Opens the manager on the store named by `cfg.state_dir`.
    pub fn open(cfg: ManagerConfig, sink: SharedSink, hooks: Arc<dyn ClientHooks>) -> Result<Self> {
        let store: Arc<dyn Store> = match &cfg.state_dir {
            Some(dir) => Arc::new(FileStore::open(dir)?),
            None => Arc::new(MemoryStore::default()),
        };
        Self::with_store(cfg, store, sink, hooks)
    }

    pub fn with_store(
        cfg: ManagerConfig,
        store: Arc<dyn Store>,
        sink: SharedSink,
        hooks: Arc<dyn ClientHooks>,
    ) -> Result<Self> {
        cfg.validate().map_err(ManagerError::Invalid)?;
        let state = State::open(store, sink.clone(), cfg.retry_cap, cfg.missed_ping_threshold)?;
        let agent_token = cfg.agent_token().unwrap_or_default().to_string();
        Ok(Manager {
            inner: Arc::new(Inner {
                state: Mutex::new(state),
                tokens: TokenTable::new(&cfg.tokens),
                pinger: AgentClient::new(&agent_token, cfg.ping_timeout()),
                dispatcher: AgentClient::new(&agent_token, cfg.dispatch_timeout()),
                cfg,
                hooks,
                sink,
                stopped: AtomicBool::new(false),
                wake: Notify::new(),
            }),
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.inner.cfg
    }

    pub fn tokens(&self) -> &TokenTable {
        &self.inner.tokens
    }

    pub fn is_stopped(&self) -> bool {
        self.inner.stopped.load(Ordering::SeqCst)
    }

    /// Read-only access to the state.
    pub fn read<R>(&self, f: impl FnOnce(&State) -> R) -> R {
        f(&self.inner.state.lock())
    }

    /// Mutates the state and persists the snapshot, whatever `f` returns,
    /// since failed operations may still record events.
    pub fn mutate<R>(&self, f: impl FnOnce(&mut State) -> Result<R>) -> Result<R> {
        if self.is_stopped() {
            return Err(ManagerError::Unavailable("manager is stopping".into()));
        }
        let mut state = self.inner.state.lock();
        let out = f(&mut state);
        state.persist()?;
        out
    }

    /// Asks the scheduler to run a pass now instead of at its next tick.
    pub fn wake_scheduler(&self) {
        self.inner.wake.notify_one();
    }

    /// One scheduling pass: plan under the lock, dispatch concurrently
    /// without it, then record the replies.
    pub async fn scheduler_tick(&self) {
        if self.is_stopped() {
            return;
        }
        let plans = self.inner.state.lock().plan_tick();
        if plans.is_empty() {
            return;
        }
        let calls = plans.iter().map(|p| async move {
            let reply = self
                .inner
                .dispatcher
                .dispatch(&p.address, &p.envelope)
                .await
                .map_err(|e| e.to_string());
            (p.run_id, p.client_id, reply)
        });
        let replies = join_all(calls).await;
        let _ = self.mutate(|s| {
            for (run, client, reply) in replies {
                s.apply_dispatch(run, client, reply);
            }
            Ok(())
        });
    }

    /// Pings every client; missed pings accumulate toward Unreachable.
    pub async fn liveness_tick(&self) {
        if self.is_stopped() {
            return;
        }
        let targets = self.read(|s| s.ping_targets());
        let calls = targets.into_iter().map(|(id, addr)| async move {
            (id, self.inner.pinger.ping(&addr).await.is_ok())
        });
        let results = join_all(calls).await;
        let mut restart = Vec::new();
        let _ = self.mutate(|s| {
            for (id, ok) in results {
                if ok {
                    s.ping_succeeded(id);
                } else if let Some(node) = s.ping_failed(id) {
                    if node.config.allow_remote_restart {
                        restart.push(node);
                    }
                }
            }
            s.reassign_unreachable();
            Ok(())
        });
        for node in restart {
            if self.inner.hooks.host_reachable(&node) {
                self.read(|s| s.note_restart(node.client_id));
                self.inner.hooks.restart_agent(&node);
            }
        }
    }

    /// Reconciles run states with what each busy agent reports.
    pub async fn supervision_tick(&self) {
        if self.is_stopped() {
            return;
        }
        let _ = self.mutate(|s| {
            s.reassign_unreachable();
            Ok(())
        });
        let targets = self.read(|s| s.supervision_targets());
        let calls = targets.into_iter().map(|(id, addr)| async move {
            let polled_at = now_ms();
            (id, polled_at, self.inner.pinger.runs(&addr).await)
        });
        let results = join_all(calls).await;
        let _ = self.mutate(|s| {
            for (id, polled_at, views) in results {
                if let Ok(views) = views {
                    s.reconcile(id, polled_at, &views);
                }
            }
            Ok(())
        });
    }

    fn spawn_monitors(&self) -> Vec<JoinHandle<()>> {
        let p = self.inner.cfg.periods.clone();
        let secs = |s: f64| Duration::from_secs_f64(s.max(0.001));
        let mut tasks = Vec::new();

        let m = self.clone();
        let period = secs(p.scheduler_s);
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
            loop {
                tokio::select! {
                    _ = tick.tick() => {}
                    _ = m.inner.wake.notified() => {}
                }
                m.scheduler_tick().await;
            }
        }));

        let m = self.clone();
        let period = secs(p.liveness_s);
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                m.liveness_tick().await;
            }
        }));

        let m = self.clone();
        let period = secs(p.supervision_s);
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                m.supervision_tick().await;
            }
        }));
        tasks
    }
}

/// A serving manager. Dropping the handle does not stop it; call
/// [`ManagerHandle::shutdown`] or [`ManagerHandle::kill`].
pub struct ManagerHandle {
    pub addr: SocketAddr,
    manager: Manager,
    stop_tx: Option<oneshot::Sender<()>>,
    server: JoinHandle<()>,
    monitors: Vec<JoinHandle<()>>,
}

impl ManagerHandle {
    pub fn manager(&self) -> &Manager {
        &self.manager
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops the monitors and drains in-flight HTTP requests.
    pub async fn shutdown(mut self) {
        self.stop_monitors();
        if let Some(tx) = self.stop_tx.take() {
            let _ = tx.send(());
        }
        if tokio::time::timeout(Duration::from_secs(5), &mut self.server).await.is_err() {
            self.server.abort();
        }
        self.manager.inner.sink.emit("manager", TraceEvent::ManagerStopped);
    }

    /// Abrupt stop: nothing is drained. State already persisted survives.
    pub fn kill(mut self) {
        self.stop_monitors();
        self.server.abort();
        self.manager.inner.sink.emit("manager", TraceEvent::ManagerStopped);
    }

    fn stop_monitors(&mut self) {
        self.manager.inner.stopped.store(true, Ordering::SeqCst);
        for t in self.monitors.drain(..) {
            t.abort();
        }
    }
}

/// Serves the REST API on `listener` and starts the monitors.
pub async fn serve(manager: Manager, listener: TcpListener) -> std::io::Result<ManagerHandle> {
    let addr = listener.local_addr()?;
    let app = crate::api::router(manager.clone());
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let shutdown = async {
            let _ = stop_rx.await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!("server error: {e}");
        }
    });
    manager.inner.sink.emit("manager", TraceEvent::ManagerStarted);
    let monitors = manager.spawn_monitors();
    Ok(ManagerHandle {
        addr,
        manager,
        stop_tx: Some(stop_tx),
        server,
        monitors,
    })
}
