use std::collections::HashMap;
use std::os::unix::process::ExitStatusExt;
use std::process::{Child, Command};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use gridforge_core::time::now_ms;

use crate::spec::{ExecHandle, ExecState, HandleId};

type KillHook = Box<dyn Fn() + Send + Sync>;

struct Entry {
    pgid: i32,
    handle: Mutex<ExecHandle>,
    done: Condvar,
    kill_requested: AtomicBool,
    on_kill: Option<KillHook>,
}

impl Entry {
    fn state(&self) -> ExecState {
        lock(&self.handle).state
    }

    fn wait_terminal(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut h = lock(&self.handle);
        while !h.state.is_terminal() {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            h = self
                .done
                .wait_timeout(h, deadline - now)
                .map(|(g, _)| g)
                .unwrap_or_else(|e| e.into_inner().0);
        }
        true
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Tracks detached child process groups. Each child runs in its own
/// session, so signals go to the whole tree.
pub(crate) struct ProcessTable {
    prefix: &'static str,
    next: AtomicU64,
    grace: Duration,
    entries: Mutex<HashMap<HandleId, Arc<Entry>>>,
}

impl ProcessTable {
    pub fn new(prefix: &'static str, grace: Duration) -> Self {
        ProcessTable {
            prefix,
            next: AtomicU64::new(1),
            grace,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn next_id(&self) -> HandleId {
        let n = self.next.fetch_add(1, Ordering::Relaxed);
        HandleId(format!("{}-{}-{n}", self.prefix, std::process::id()))
    }

    /// Spawns `cmd`, which must put the child in a new session.
    pub fn spawn(
        &self,
        id: HandleId,
        mut cmd: Command,
        confined: bool,
        on_kill: Option<KillHook>,
    ) -> std::io::Result<ExecHandle> {
        let child = cmd.spawn()?;
        let pgid = child.id() as i32;
        let handle = ExecHandle {
            id: id.clone(),
            state: ExecState::Running,
            started_at: now_ms(),
            finished_at: None,
            confined,
        };
        let entry = Arc::new(Entry {
            pgid,
            handle: Mutex::new(handle.clone()),
            done: Condvar::new(),
            kill_requested: AtomicBool::new(false),
            on_kill,
        });
        lock(&self.entries).insert(id.clone(), entry.clone());
        thread::Builder::new()
            .name(format!("wait-{id}"))
            .spawn(move || reap(child, entry))?;
        Ok(handle)
    }

    pub fn status(&self, id: &HandleId) -> Option<ExecHandle> {
        let entry = lock(&self.entries).get(id).cloned()?;
        let h = lock(&entry.handle).clone();
        Some(h)
    }

    pub fn kill(&self, id: &HandleId) -> Option<ExecState> {
        let entry = lock(&self.entries).get(id).cloned()?;
        Some(self.kill_entry(&entry))
    }

    fn kill_entry(&self, entry: &Entry) -> ExecState {
        if entry.state().is_terminal() {
            return entry.state();
        }
        entry.kill_requested.store(true, Ordering::SeqCst);
        if let Some(hook) = &entry.on_kill {
            hook();
        }
        signal_group(entry.pgid, libc::SIGTERM);
        if !entry.wait_terminal(self.grace) {
            signal_group(entry.pgid, libc::SIGKILL);
            entry.wait_terminal(Duration::from_secs(5));
        }
        entry.state()
    }

    pub fn kill_all(&self) {
        let entries: Vec<Arc<Entry>> = lock(&self.entries).values().cloned().collect();
        let handles: Vec<_> = entries
            .into_iter()
            .filter(|e| !e.state().is_terminal())
            .map(|e| {
                let grace = self.grace;
                thread::spawn(move || {
                    let table = ProcessTable::new("", grace);
                    table.kill_entry(&e);
                })
            })
            .collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

fn signal_group(pgid: i32, sig: libc::c_int) {
    if pgid > 0 {
        // SAFETY: kill(2) with a negative pid targets the process group.
        unsafe {
            libc::kill(-pgid, sig);
        }
    }
}

fn reap(mut child: Child, entry: Arc<Entry>) {
    let status = child.wait();
    // Leftover members of the group do not outlive the run.
    signal_group(entry.pgid, libc::SIGKILL);
    let killed = entry.kill_requested.load(Ordering::SeqCst);
    let state = match status {
        Ok(_) if killed => ExecState::Killed,
        Ok(s) => match (s.code(), s.signal()) {
            (Some(code), _) => ExecState::Exited(code),
            (None, Some(sig)) => ExecState::Exited(128 + sig),
            (None, None) => ExecState::Exited(-1),
        },
        Err(_) => ExecState::Exited(-1),
    };
    let mut h = lock(&entry.handle);
    h.state = state;
    h.finished_at = Some(now_ms());
    drop(h);
    entry.done.notify_all();
}
