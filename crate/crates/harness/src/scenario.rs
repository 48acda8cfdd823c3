//! Declarative scenario scripts: a cluster, some processes and files,
//! request submissions and a fault script.
//!
//! ```toml
//! name = "redistribution"
//! timeout_s = 120
//!
//! [cluster]
//! time_compression = 10
//! clients = [{ count = 4, slots = 1 }]
//!
//! [[processes]]
//! name = "sleepy"
//! job = { mode = "sleep", seconds = 3 }
//!
//! [[submit]]
//! process = "sleepy"
//! repetitions = 10
//!
//! [[faults]]
//! target = 1
//! kind = "disconnect"
//! at = { acked = 1 }
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use gridforge_core::events::TraceEvent;
use gridforge_core::validate::ParameterInput;
use gridforge_core::{RequestForm, RequestId, RunStatus};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClientSpec, Cluster, ClusterSpec, PUBLIC_ROOM, SYNTHETIC_DOMAIN};
use crate::error::HarnessError;
use crate::trace::{Trace, TraceRecord};
use crate::workload::Job;

fn alice() -> String {
    "alice".into()
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientGroup {
    #[serde(default = "one")]
    pub count: u32,
    #[serde(flatten)]
    pub client: ClientSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterDecl {
    pub time_compression: f64,
    pub retry_cap: u32,
    pub missed_ping_threshold: u32,
    pub max_restarts: u32,
    pub seed: u64,
    pub clients: Vec<ClientGroup>,
}

impl Default for ClusterDecl {
    fn default() -> Self {
        let d = ClusterSpec::default();
        ClusterDecl {
            time_compression: d.time_compression,
            retry_cap: d.retry_cap,
            missed_ping_threshold: d.missed_ping_threshold,
            max_restarts: d.max_restarts,
            seed: d.seed,
            clients: vec![ClientGroup { count: 1, client: ClientSpec::default() }],
        }
    }
}

impl ClusterDecl {
    pub fn to_spec(&self) -> ClusterSpec {
        let mut clients = Vec::new();
        for g in &self.clients {
            for k in 0..g.count {
                let mut c = g.client.clone();
                if g.count > 1 {
                    c.name = c.name.map(|n| format!("{n}-{}", k + 1));
                }
                clients.push(c);
            }
        }
        ClusterSpec {
            clients,
            time_compression: self.time_compression,
            retry_cap: self.retry_cap,
            missed_ping_threshold: self.missed_ping_threshold,
            max_restarts: self.max_restarts,
            seed: self.seed,
            workload_bin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessDecl {
    pub name: String,
    #[serde(default = "alice")]
    pub user: String,
    pub job: Job,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDecl {
    pub name: String,
    #[serde(default = "alice")]
    pub user: String,
    /// Literal content; otherwise `size` seeded pseudo-random bytes.
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default)]
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    #[serde(default = "alice")]
    pub user: String,
    pub process: String,
    pub repetitions: i64,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub parameters: Vec<String>,
    #[serde(default)]
    pub shared_files: Vec<String>,
    #[serde(default)]
    pub rooms: Vec<String>,
    #[serde(default)]
    pub needs_gpu: bool,
    #[serde(default)]
    pub same_machine: bool,
    /// Delay after the scenario starts.
    #[serde(default)]
    pub after_s: f64,
    /// Hold the submission until the request of this earlier submission
    /// is terminal.
    #[serde(default)]
    pub after_request: Option<usize>,
}

impl Submission {
    pub fn form(&self) -> RequestForm {
        RequestForm {
            domain: SYNTHETIC_DOMAIN.into(),
            process: self.process.clone(),
            repetitions: self.repetitions,
            parallel: Some(self.parallel),
            parameters: Some(ParameterInput::List(self.parameters.clone())),
            needs_gpu: Some(self.needs_gpu),
            same_machine: Some(self.same_machine),
            shared_files: self.shared_files.clone(),
            rooms: if self.rooms.is_empty() {
                vec![PUBLIC_ROOM.into()]
            } else {
                self.rooms.clone()
            },
        }
    }
}

/// When a fault fires. Counts are taken from the scenario's own trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Seconds after the scenario starts.
    AfterS(f64),
    /// Once the target client has acknowledged this many dispatches.
    Acked(u32),
    /// Once this many runs have entered Running, cluster-wide.
    Started(u32),
    /// Once this many runs have succeeded, cluster-wide.
    Succeeded(u32),
    /// `delay_s` after fault number `index` of this script fired.
    AfterFault { index: usize, delay_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    Disconnect,
    Crash,
    Revive,
    UserLogin,
    UserLogout,
    CpuLoad { pct: f64 },
    RestartManager {
        #[serde(default)]
        down_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at: Trigger,
    /// Client index, 0-based. Unused by `restart_manager`.
    #[serde(default)]
    pub target: usize,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub cluster: ClusterDecl,
    #[serde(default)]
    pub processes: Vec<ProcessDecl>,
    #[serde(default)]
    pub files: Vec<FileDecl>,
    #[serde(default)]
    pub submit: Vec<Submission>,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
}

fn default_timeout() -> f64 {
    60.0
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Script(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| HarnessError::Script(format!("{}: {e}", path.display())))
    }

    /// A script with nothing to submit and no faults.
    pub fn empty(name: &str) -> Scenario {
        Scenario {
            name: name.into(),
            description: String::new(),
            timeout_s: default_timeout(),
            cluster: ClusterDecl::default(),
            processes: Vec::new(),
            files: Vec::new(),
            submit: Vec::new(),
            faults: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Script(m));
        let spec = self.cluster.to_spec();
        spec.validate().map_err(HarnessError::Script)?;
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return bad("timeout_s must be positive".into());
        }
        for (i, s) in self.submit.iter().enumerate() {
            if s.after_request.is_some_and(|j| j >= i) {
                return bad(format!("submission {i} waits on a later submission"));
            }
            if !self.processes.iter().any(|p| p.name == s.process && p.user == s.user) {
                return bad(format!("submission names unknown process {:?} of {}", s.process, s.user));
            }
        }
        let mut down = vec![false; spec.clients.len()];
        for (i, f) in self.faults.iter().enumerate() {
            if let Trigger::AfterFault { index, .. } = f.at {
                if index >= i {
                    return bad(format!("fault {i} waits on fault {index}, which is not earlier"));
                }
            }
            if matches!(f.kind, FaultKind::RestartManager { .. }) {
                continue;
            }
            if f.target >= down.len() {
                return bad(format!("fault {i} targets client {} of {}", f.target, down.len()));
            }
            match f.kind {
                FaultKind::Disconnect | FaultKind::Crash => down[f.target] = true,
                FaultKind::Revive if !down[f.target] => {
                    return bad(format!("fault {i} revives client {} which was never taken down", f.target));
                }
                FaultKind::Revive => down[f.target] = false,
                _ => {}
            }
        }
        Ok(())
    }

    /// Deterministic file content for declarations without literal content.
    fn file_bytes(&self, index: usize, decl: &FileDecl) -> Vec<u8> {
        if let Some(c) = &decl.content {
            return c.clone().into_bytes();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cluster.seed.wrapping_add(index as u64));
        let mut bytes = vec![0u8; decl.size];
        rng.fill_bytes(&mut bytes);
        bytes
    }
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    /// Everything recorded from the scenario's start to quiescence.
    pub trace: Trace,
    /// Request ids in submission order.
    pub requests: Vec<RequestId>,
    pub elapsed: Duration,
    /// Indices of the faults that fired.
    pub fired: Vec<usize>,
}

fn count(records: &[TraceRecord], pred: impl Fn(&TraceEvent) -> bool) -> u32 {
    records.iter().filter(|r| pred(&r.event)).count() as u32
}

/// Runs `script` on `cluster` until every submitted request is terminal.
pub async fn run_scenario(cluster: &mut Cluster, script: &Scenario) -> Result<ScenarioOutcome, HarnessError> {
    script.validate()?;
    let t0 = Instant::now();
    if script.submit.is_empty() && script.faults.is_empty() {
        return Ok(ScenarioOutcome {
            trace: Trace::default(),
            requests: Vec::new(),
            elapsed: t0.elapsed(),
            fired: Vec::new(),
        });
    }
    let start = cluster.collector().next_seq();
    for p in &script.processes {
        cluster.install_workload(&p.user, &p.name, &p.job).await?;
    }
    for (i, f) in script.files.iter().enumerate() {
        cluster.upload_file(&f.user, &f.name, script.file_bytes(i, f)).await?;
    }

    let timeout = Duration::from_secs_f64(script.timeout_s);
    let mut submitted: Vec<Option<RequestId>> = vec![None; script.submit.len()];
    let mut fired_at: BTreeMap<usize, Instant> = BTreeMap::new();
    loop {
        let now = Instant::now();
        let elapsed = now - t0;
        for (i, s) in script.submit.iter().enumerate() {
            let prior_done = match s.after_request {
                None => true,
                Some(j) => submitted[j].is_some_and(|id| cluster.request_status(id).is_some_and(|st| st.is_terminal())),
            };
            if submitted[i].is_none() && prior_done && elapsed.as_secs_f64() >= s.after_s {
                // The manager may be restarting; try again next round.
                if let Ok(id) = cluster.submit(&s.user, &s.form()).await {
                    submitted[i] = Some(id);
                }
            }
        }
        for (i, f) in script.faults.iter().enumerate() {
            if fired_at.contains_key(&i) || !triggered(cluster, start, f, &fired_at, t0) {
                continue;
            }
            apply(cluster, f).await?;
            fired_at.insert(i, Instant::now());
        }
        cluster.pump_restarts().await?;

        let requests: Vec<RequestId> = submitted.iter().flatten().copied().collect();
        let all_submitted = requests.len() == script.submit.len();
        let done = all_submitted
            && requests
                .iter()
                .all(|id| cluster.request_status(*id).is_some_and(|s| s.is_terminal()));
        // With nothing submitted the scenario is over once its faults are.
        let faults_only = script.submit.is_empty() && fired_at.len() == script.faults.len();
        if done || faults_only {
            return Ok(ScenarioOutcome {
                trace: cluster.collector().since(start),
                requests,
                elapsed: t0.elapsed(),
                fired: fired_at.into_keys().collect(),
            });
        }
        if elapsed > timeout {
            return Err(HarnessError::Timeout {
                waited: timeout,
                trace: Box::new(cluster.collector().since(start)),
            });
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn triggered(cluster: &Cluster, start: u64, f: &FaultEvent, fired: &BTreeMap<usize, Instant>, t0: Instant) -> bool {
    match &f.at {
        Trigger::AfterS(s) => t0.elapsed().as_secs_f64() >= *s,
        Trigger::AfterFault { index, delay_s } => fired
            .get(index)
            .is_some_and(|at| at.elapsed().as_secs_f64() >= *delay_s),
        Trigger::Acked(n) => {
            let Some(node) = cluster.nodes().get(f.target) else {
                return false;
            };
            let client = node.client_id;
            cluster.collector().scan(start, |r| {
                count(r, |e| matches!(e, TraceEvent::DispatchAcked { client_id, .. } if *client_id == client)) >= *n
            })
        }
        Trigger::Started(n) => cluster.collector().scan(start, |r| {
            count(r, |e| matches!(e, TraceEvent::RunTransition { to: RunStatus::Running, .. })) >= *n
        }),
        Trigger::Succeeded(n) => cluster.collector().scan(start, |r| {
            count(r, |e| matches!(e, TraceEvent::RunTransition { to: RunStatus::Success, .. })) >= *n
        }),
    }
}

async fn apply(cluster: &mut Cluster, f: &FaultEvent) -> Result<(), HarnessError> {
    match &f.kind {
        FaultKind::Disconnect => cluster.disconnect(f.target),
        FaultKind::Crash => cluster.crash(f.target),
        FaultKind::Revive => cluster.revive(f.target).await,
        FaultKind::UserLogin => cluster.set_user_login(f.target, true),
        FaultKind::UserLogout => cluster.set_user_login(f.target, false),
        FaultKind::CpuLoad { pct } => cluster.set_cpu_load(f.target, *pct),
        FaultKind::RestartManager { down_s } => {
            cluster.restart_manager(Duration::from_secs_f64(down_s.max(0.0))).await
        }
    }
}
