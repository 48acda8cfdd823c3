//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Positional arguments filter criteria by substring.
//!
//! Everything runs on the sandbox executor against in-process clusters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::time::{Duration, Instant};

use gridforge_core::events::TraceEvent;
use gridforge_core::{
    run_status_transition, ClientId, RequestId, RequestStatus, RunEvent, RunId, RunStatus,
};
use gridforge_harness::cluster::USERS;
use gridforge_harness::scenario::{ClientGroup, ClusterDecl, ProcessDecl};
use gridforge_harness::{
    check, check_all, run_scenario, ClientSpec, Cluster, FaultEvent, FaultKind, Job, Property, Scenario,
    ScenarioOutcome, Submission, Trace, Trigger,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type BoxFut = Pin<Box<dyn Future<Output = Outcome> + Send>>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> BoxFut,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { name: "s1_single_run_output", limit: Some(secs(30)), run: || Box::pin(s1_single_run_output()) },
        Criterion { name: "s2_repetitions", limit: Some(secs(60)), run: || Box::pin(s2_repetitions()) },
        Criterion { name: "s34_speedup", limit: Some(secs(180)), run: || Box::pin(s34_speedup()) },
        Criterion { name: "s5_redistribution", limit: Some(secs(120)), run: || Box::pin(s5_redistribution()) },
        Criterion { name: "manager_restart", limit: Some(secs(120)), run: || Box::pin(manager_restart()) },
        Criterion { name: "s6_barrier_rendezvous", limit: Some(secs(60)), run: || Box::pin(s6_barrier_rendezvous()) },
        Criterion { name: "checkpoint_recovery", limit: None, run: || Box::pin(checkpoint_recovery()) },
        Criterion { name: "resource_throttling", limit: None, run: || Box::pin(resource_throttling()) },
        Criterion { name: "shared_file_economy", limit: None, run: || Box::pin(shared_file_economy()) },
        Criterion { name: "fanout_120", limit: Some(secs(300)), run: || Box::pin(fanout_120()) },
        Criterion { name: "invariant_suites", limit: None, run: || Box::pin(invariant_suites()) },
    ];
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(8)
        .enable_all()
        .build()
        .expect("tokio runtime");
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        ran += 1;
        let t0 = Instant::now();
        let outcome = rt.block_on((c.run)());
        let took = t0.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if took > limit => Err(format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs())),
            (o, _) => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:<24} {:>6.1}s  {detail}", c.name, took.as_secs_f64());
    }
    rt.shutdown_timeout(secs(5));
    println!("\n{} criteria, {} passed, {failed} failed", ran, ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario(name: &str) -> Result<Scenario, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::load(&path).map_err(|e| e.to_string())
}

fn workload_bin() -> PathBuf {
    env!("CARGO_BIN_EXE_gridforge-workload").into()
}

async fn spawn(sc: &Scenario) -> Result<Cluster, String> {
    let mut spec = sc.cluster.to_spec();
    spec.workload_bin = Some(workload_bin());
    Cluster::spawn(spec).await.map_err(|e| format!("cluster: {e}"))
}

async fn play(sc: &Scenario) -> Result<(Cluster, ScenarioOutcome), String> {
    let mut cluster = spawn(sc).await?;
    match run_scenario(&mut cluster, sc).await {
        Ok(out) => Ok((cluster, out)),
        Err(e) => Err(format!("{}: {e}", sc.name)),
    }
}

/// All properties over the whole cluster trace, registrations included.
fn properties_hold(trace: &Trace) -> Result<(), String> {
    let v = check_all(trace);
    ensure(v.is_empty(), || {
        v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    })
}

fn completed(out: &ScenarioOutcome) -> Result<(), String> {
    let outcomes = out.trace.request_outcomes();
    for id in &out.requests {
        let st = outcomes.get(id).copied();
        ensure(st == Some(RequestStatus::Completed), || format!("request {id} ended {st:?}"))?;
    }
    Ok(())
}

/// Files of a .tar.gz, read without the project's own archive code.
fn untar(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut ar = tar::Archive::new(flate2::read::GzDecoder::new(bytes));
    let mut out = BTreeMap::new();
    for entry in ar.entries().map_err(|e| e.to_string())? {
        let mut entry = entry.map_err(|e| e.to_string())?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = entry.path().map_err(|e| e.to_string())?.to_string_lossy().trim_start_matches("./").to_string();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf).map_err(|e| e.to_string())?;
        out.insert(path, buf);
    }
    Ok(out)
}

/// The merged console as it must look: one `==> rank N <==` section per rank
/// in ascending rank order, each section newline-terminated.
fn merged_oracle(consoles: &BTreeMap<u32, Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    for (rank, text) in consoles {
        out.extend(format!("==> rank {rank} <==\n").into_bytes());
        out.extend(text);
        if text.last().is_some_and(|b| *b != b'\n') {
            out.push(b'\n');
        }
    }
    out
}

/// Section ranks of a merged console, in the order they appear.
fn section_ranks(merged: &str) -> Vec<u32> {
    merged
        .lines()
        .filter_map(|l| l.strip_prefix("==> rank ")?.strip_suffix(" <==")?.parse().ok())
        .collect()
}

fn success_rows(trace: &Trace, id: RequestId) -> Vec<(u32, RunId, Option<ClientId>)> {
    trace
        .events()
        .filter_map(|e| match e {
            TraceEvent::RunTransition { request_id, rank, run_id, client_id, to: RunStatus::Success, .. }
                if *request_id == id =>
            {
                Some((*rank, *run_id, *client_id))
            }
            _ => None,
        })
        .collect()
}

/// Downloads each successful run's bundle and the request archive, and
/// compares the merged console against the oracle built from the runs.
async fn aggregation_matches(cluster: &Cluster, user: &str, id: RequestId) -> Result<usize, String> {
    let api = cluster.user(user);
    let table = api.runs(id).await.map_err(|e| e.to_string())?;
    let mut consoles = BTreeMap::new();
    for r in table.runs.iter().filter(|r| r.status == RunStatus::Success) {
        let bundle = api.run_bundle(r.run_id).await.map_err(|e| format!("run {} bundle: {e}", r.run_id))?;
        let files = untar(&bundle)?;
        let console = files.get("output.txt").ok_or_else(|| format!("run {} has no output.txt", r.run_id))?;
        ensure(consoles.insert(r.rank, console.clone()).is_none(), || format!("rank {} twice", r.rank))?;
    }
    let archive = api.request_bundle(id, false).await.map_err(|e| e.to_string())?;
    let files = untar(&archive)?;
    let merged = files.get("merged_output.txt").ok_or("archive has no merged_output.txt")?;
    let expected = merged_oracle(&consoles);
    ensure(*merged == expected, || {
        format!(
            "merged console differs from the per-run oracle ({} vs {} bytes)",
            merged.len(),
            expected.len()
        )
    })?;
    for rank in consoles.keys() {
        ensure(files.contains_key(&format!("rank_{rank}/output.txt")), || format!("archive lacks rank_{rank}/"))?;
    }
    Ok(consoles.len())
}

async fn s1_single_run_output() -> Outcome {
    let sc = scenario("s1_print.toml")?;
    let Job::Print { text } = &sc.processes[0].job else {
        return Err("s1 script is not a print job".into());
    };
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let id = out.requests[0];
    let api = cluster.user("alice");
    let table = api.runs(id).await.map_err(|e| e.to_string())?;
    ensure(table.runs.len() == 1, || format!("{} run rows", table.runs.len()))?;
    let bundle = api.run_bundle(table.runs[0].run_id).await.map_err(|e| e.to_string())?;
    let files = untar(&bundle)?;
    let got = files.get("output.txt").ok_or("bundle has no output.txt")?;
    ensure(got == text.as_bytes(), || format!("output.txt is {:?}", String::from_utf8_lossy(got)))?;
    properties_hold(&cluster.trace())?;
    Ok(format!("output.txt matches {} bytes", got.len()))
}

async fn s2_repetitions() -> Outcome {
    let sc = scenario("s2_repetitions.toml")?;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let id = out.requests[0];
    let wins = success_rows(&out.trace, id);
    let ranks: Vec<u32> = {
        let mut r: Vec<u32> = wins.iter().map(|w| w.0).collect();
        r.sort();
        r
    };
    ensure(ranks == (0..10).collect::<Vec<_>>(), || format!("success ranks {ranks:?}"))?;
    let api = cluster.user("alice");
    let archive = api.request_bundle(id, false).await.map_err(|e| e.to_string())?;
    let merged = untar(&archive)?.remove("merged_output.txt").ok_or("no merged console")?;
    let order = section_ranks(&String::from_utf8_lossy(&merged));
    ensure(order.windows(2).all(|w| w[0] < w[1]) && order.len() == 10, || format!("section order {order:?}"))?;
    let n = aggregation_matches(&cluster, "alice", id).await?;
    properties_hold(&cluster.trace())?;
    let clients: BTreeSet<_> = wins.iter().filter_map(|w| w.2).collect();
    Ok(format!("10 ranks once each on {} clients, {n} run bundles, ascending merge", clients.len()))
}

async fn s34_speedup() -> Outcome {
    let sc = scenario("s4_speedup.toml")?;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let wall = |id: RequestId| -> Option<f64> {
        let mut sub = None;
        let mut done = None;
        for r in out.trace.iter() {
            match &r.event {
                TraceEvent::RequestSubmitted { request_id, .. } if *request_id == id => sub = Some(r.at_ms),
                TraceEvent::RequestStatusChanged { request_id, status: RequestStatus::Completed }
                    if *request_id == id =>
                {
                    done = Some(r.at_ms)
                }
                _ => {}
            }
        }
        Some((done? - sub?) as f64 / 1000.0)
    };
    // Submissions: warm-up, sequential, parallel.
    let seq = wall(out.requests[1]).ok_or("no sequential timing")?;
    let par = wall(out.requests[2]).ok_or("no parallel timing")?;
    let clients = sc.cluster.to_spec().clients.len() as f64;
    let bound = seq / clients * 1.5;
    properties_hold(&cluster.trace())?;
    ensure(par <= bound, || format!("parallel {par:.2}s > bound {bound:.2}s (sequential {seq:.2}s)"))?;
    Ok(format!("sequential {seq:.2}s, parallel {par:.2}s, bound {bound:.2}s, gain {:.2}x", seq / par))
}

async fn s5_redistribution() -> Outcome {
    let sc = scenario("s5_redistribution.toml")?;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    ensure(out.fired.len() == 2, || format!("{} of 2 faults fired", out.fired.len()))?;
    let id = out.requests[0];
    let table = cluster.user("alice").runs(id).await.map_err(|e| e.to_string())?;
    let canceled: Vec<_> = table
        .runs
        .iter()
        .filter(|r| r.status.code() == 5 && r.obs == "Canceled")
        .collect();
    ensure(!canceled.is_empty(), || "no row with status 5 and obs Canceled".into())?;
    let mut wins: HashMap<u32, Vec<Option<ClientId>>> = HashMap::new();
    for r in table.runs.iter().filter(|r| r.status == RunStatus::Success) {
        wins.entry(r.rank).or_default().push(r.client_id);
    }
    for rank in 0..10 {
        let n = wins.get(&rank).map_or(0, Vec::len);
        ensure(n == 1, || format!("rank {rank} has {n} Success rows"))?;
    }
    for c in &canceled {
        let winner = wins[&c.rank][0];
        ensure(winner != c.client_id, || format!("rank {} re-succeeded on the same client", c.rank))?;
    }
    properties_hold(&cluster.trace())?;
    Ok(format!("{} canceled rows re-succeeded elsewhere, {} rows total", canceled.len(), table.runs.len()))
}

async fn manager_restart() -> Outcome {
    let sc = scenario("manager_restart.toml")?;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let id = out.requests[0];
    let t = &out.trace;
    let stopped = t
        .iter()
        .find(|r| matches!(r.event, TraceEvent::ManagerStopped))
        .ok_or("manager never stopped")?
        .seq;
    let restarted = t
        .iter()
        .find(|r| r.seq > stopped && matches!(r.event, TraceEvent::ManagerStarted))
        .ok_or("manager never came back")?
        .seq;
    let exited_while_down = t
        .iter()
        .filter(|r| r.seq > stopped && r.seq < restarted && matches!(r.event, TraceEvent::ExecExited { .. }))
        .count();
    let wins = success_rows(t, id);
    let after = t
        .iter()
        .filter(|r| r.seq > restarted && matches!(r.event, TraceEvent::RunTransition { to: RunStatus::Success, .. }))
        .count();
    let launches = t.events().filter(|e| matches!(e, TraceEvent::ExecLaunched { .. })).count();
    let reps = sc.submit[0].repetitions as usize;
    ensure(wins.len() == reps, || format!("{} successes for {reps} ranks", wins.len()))?;
    ensure(exited_while_down > 0, || "no run finished while the manager was down".into())?;
    ensure(launches == reps, || format!("{launches} launches for {reps} ranks: work was redone"))?;
    properties_hold(&cluster.trace())?;
    Ok(format!(
        "{exited_while_down} runs finished during the outage, {after} results recorded after restart, no relaunches"
    ))
}

async fn s6_barrier_rendezvous() -> Outcome {
    let sc = scenario("s6_rendezvous.toml")?;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let id = out.requests[0];
    let full = cluster.trace();
    check(&full, Property::BarrierSafety).map_err(|v| v.to_string())?;
    let (addr, port) = out
        .trace
        .events()
        .find_map(|e| match e {
            TraceEvent::BarrierReleased { request_id, master_addr, master_port } if *request_id == id => {
                Some((master_addr.clone(), *master_port))
            }
            _ => None,
        })
        .ok_or("barrier never released")?;
    // No run of the request started before the release.
    let release_seq = out
        .trace
        .iter()
        .find(|r| matches!(r.event, TraceEvent::BarrierReleased { .. }))
        .map(|r| r.seq)
        .unwrap_or(u64::MAX);
    let early = out.trace.iter().filter(|r| {
        r.seq < release_seq
            && matches!(&r.event, TraceEvent::RunTransition { request_id, to: RunStatus::Running, .. } if *request_id == id)
    });
    ensure(early.count() == 0, || "a rank started before the barrier release".into())?;
    let archive = cluster.user("alice").request_bundle(id, false).await.map_err(|e| e.to_string())?;
    let merged = untar(&archive)?.remove("merged_output.txt").ok_or("no merged console")?;
    let merged = String::from_utf8_lossy(&merged).into_owned();
    for rank in [1, 2] {
        let line = format!("rank {rank} echo ok via {addr}:{port}");
        ensure(merged.contains(&line), || format!("missing {line:?} in {merged:?}"))?;
    }
    ensure(merged.contains("rank 0 served 2"), || format!("rank 0 did not serve both peers: {merged:?}"))?;
    properties_hold(&full)?;
    Ok(format!("released at {addr}:{port}; ranks 1 and 2 echoed through rank 0"))
}

async fn checkpoint_recovery() -> Outcome {
    let sc = scenario("checkpoint.toml")?;
    let Job::Checkpoint { steps, crash_at: Some(at), .. } = sc.processes[0].job else {
        return Err("checkpoint script has no crash point".into());
    };
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let id = out.requests[0];
    let table = cluster.user("alice").runs(id).await.map_err(|e| e.to_string())?;
    ensure(table.runs.len() == 1, || format!("{} run rows", table.runs.len()))?;
    let run = &table.runs[0];
    ensure(run.status == RunStatus::Success, || format!("run ended {}", run.status))?;
    let bundle = cluster.user("alice").run_bundle(run.run_id).await.map_err(|e| e.to_string())?;
    let files = untar(&bundle)?;
    let console = String::from_utf8_lossy(files.get("output.txt").ok_or("no output.txt")?).into_owned();
    let starts: Vec<&str> = console.lines().filter(|l| l.starts_with("start ")).collect();
    let resume = format!("start {at}");
    ensure(starts.last() == Some(&resume.as_str()), || format!("start lines {starts:?}, want last {resume:?}"))?;
    ensure(at == steps / 2, || format!("crash point {at} is not half of {steps}"))?;
    let relaunches = out
        .trace
        .events()
        .filter(|e| matches!(e, TraceEvent::ExecLaunched { restart, .. } if *restart > 0))
        .count();
    ensure(relaunches == 1, || format!("{relaunches} relaunches"))?;
    ensure(console.contains(&format!("done {steps}")), || "no completion line".into())?;
    Ok(format!("relaunch printed {resume:?}; run Success"))
}

async fn resource_throttling() -> Outcome {
    let cpu = cpu_throttling().await?;
    let login = login_throttling().await?;
    Ok(format!("{cpu}; {login}"))
}

async fn cpu_throttling() -> Outcome {
    let sc = scenario("throttling.toml")?;
    let threshold = sc.cluster.to_spec().clients[0].cpu_refusal_threshold_pct;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let hot = cluster.node(0);
    let (source, client) = (hot.source(), hot.client_id);
    let t = &out.trace;
    // Every heartbeat tells the truth about the threshold.
    let mut beats = 0;
    for r in t.iter().filter(|r| r.source == source) {
        if let TraceEvent::AgentHeartbeat { accepting_new, cpu_pct, .. } = r.event {
            beats += 1;
            ensure(accepting_new == (cpu_pct < threshold), || {
                format!("heartbeat at cpu {cpu_pct} said accepting_new={accepting_new}")
            })?;
        }
    }
    let first_refusal = t
        .iter()
        .find(|r| r.source == source && matches!(r.event, TraceEvent::AgentHeartbeat { accepting_new: false, .. }))
        .ok_or("no refusing heartbeat")?
        .seq;
    let back = t
        .iter()
        .find(|r| {
            r.seq > first_refusal
                && r.source == source
                && matches!(r.event, TraceEvent::AgentHeartbeat { accepting_new: true, .. })
        })
        .ok_or("load never dropped")?
        .seq;
    let in_window = |r: &&gridforge_harness::TraceRecord| r.seq > first_refusal && r.seq < back;
    let placed_hot = t
        .iter()
        .filter(in_window)
        .filter(|r| {
            matches!(r.event, TraceEvent::DispatchAcked { client_id, .. } if client_id == client)
                || (r.source == source && matches!(r.event, TraceEvent::AgentAccepted { .. }))
        })
        .count();
    let placed_other = t
        .iter()
        .filter(in_window)
        .filter(|r| matches!(r.event, TraceEvent::DispatchAcked { client_id, .. } if client_id != client))
        .count();
    ensure(placed_hot == 0, || format!("{placed_hot} runs placed on the hot client while it refused"))?;
    ensure(placed_other > 0, || "nothing was placed while the client refused".into())?;
    check(&cluster.trace(), Property::ThrottleCompliance).map_err(|v| v.to_string())?;
    Ok(format!(
        "{beats} heartbeats consistent with {threshold}%; 0 placements on the hot client, {placed_other} elsewhere"
    ))
}

async fn login_throttling() -> Outcome {
    let sc = scenario("interactive_user.toml")?;
    let spec = sc.cluster.to_spec();
    let c = &spec.clients[0];
    let want_cpu = c.interactive_allocation_pct;
    let want_mem = c.ram_mb * c.interactive_allocation_pct as u64 / 100;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let login = out
        .trace
        .iter()
        .find(|r| matches!(&r.event, TraceEvent::Fault { description } if description.starts_with("user login")))
        .ok_or("login never happened")?
        .seq;
    let node = cluster.node(0);
    let first = out
        .trace
        .iter()
        .find(|r| r.seq > login && r.source == node.source() && matches!(r.event, TraceEvent::ExecLaunched { .. }))
        .ok_or("nothing launched after login")?;
    let TraceEvent::ExecLaunched { cpu_share_pct, memory_mb, .. } = first.event else {
        unreachable!()
    };
    ensure((cpu_share_pct - want_cpu).abs() < 1e-9 && memory_mb == want_mem, || {
        format!("launched with cpu {cpu_share_pct}% mem {memory_mb} MB, want {want_cpu}% / {want_mem} MB")
    })?;
    Ok(format!("after login: cpu {cpu_share_pct}%, mem {memory_mb} of {} MB", c.ram_mb))
}

async fn shared_file_economy() -> Outcome {
    let sc = scenario("s3_shared_files.toml")?;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let full = cluster.trace();
    let transfers: Vec<(ClientId, gridforge_core::FileId)> = full
        .events()
        .filter_map(|e| match e {
            TraceEvent::FileTransfer { client_id, file_id, .. } => Some((*client_id, *file_id)),
            _ => None,
        })
        .collect();
    let clients = sc.cluster.to_spec().clients.len();
    let bound = clients * sc.files.len();
    ensure(transfers.len() <= bound, || format!("{} transfers > {bound}", transfers.len()))?;
    let distinct: BTreeSet<_> = transfers.iter().collect();
    ensure(distinct.len() == transfers.len(), || "a file went to the same client twice".into())?;

    // Every rank saw the exact bytes, read-only. Generated content is read
    // back from an agent's file cache and hashed here.
    let id = out.requests[0];
    let stored = cluster.user("alice").files().await.map_err(|e| e.to_string())?;
    let archive = cluster.user("alice").request_bundle(id, false).await.map_err(|e| e.to_string())?;
    let merged = String::from_utf8_lossy(untar(&archive)?.get("merged_output.txt").ok_or("no merged console")?).into_owned();
    let reps = sc.submit[0].repetitions as usize;
    for decl in &sc.files {
        let f = stored.iter().find(|f| f.name == decl.name).ok_or_else(|| format!("{} not stored", decl.name))?;
        let bytes = match &decl.content {
            Some(c) => c.clone().into_bytes(),
            None => {
                let cached = cluster.node(0).config().workdir.join("cache").join(format!("file-{}", f.file_id));
                std::fs::read(&cached).map_err(|e| format!("{}: {e}", cached.display()))?
            }
        };
        ensure(decl.content.is_some() || bytes.len() == decl.size, || format!("{} is {} bytes", decl.name, bytes.len()))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        ensure(digest == f.content_hash, || format!("{} stored with hash {}", f.name, f.content_hash))?;
        let line = format!("{} {digest} read-only", f.name);
        let n = merged.lines().filter(|l| *l == line).count();
        ensure(n == reps, || format!("{n} of {reps} ranks read {} intact and read-only", f.name))?;
    }
    properties_hold(&full)?;
    Ok(format!("{} transfers for {reps} ranks on {clients} clients (bound {bound})", transfers.len()))
}

async fn fanout_120() -> Outcome {
    let sc = scenario("fanout.toml")?;
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let id = out.requests[0];
    let wins = success_rows(&out.trace, id);
    ensure(wins.len() == 120, || format!("{} successes", wins.len()))?;
    let mut per_client: HashMap<ClientId, usize> = HashMap::new();
    for (_, _, c) in &wins {
        *per_client.entry(c.ok_or("success without client")?).or_default() += 1;
    }
    let spec = cluster.spec().clone();
    let mut by_speed: Vec<(f64, usize)> = cluster
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| (spec.clients[i].speed, per_client.get(&n.client_id).copied().unwrap_or(0)))
        .collect();
    by_speed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let counts: Vec<usize> = by_speed.iter().map(|x| x.1).collect();
    ensure(counts.windows(2).all(|w| w[0] < w[1]), || format!("counts by ascending speed {by_speed:?}"))?;
    properties_hold(&cluster.trace())?;
    let shown: Vec<String> = by_speed.iter().map(|(s, n)| format!("{s}x:{n}")).collect();
    Ok(format!("runs per client {}", shown.join(" ")))
}

// ----- invariant suites ---------------------------------------------------

async fn invariant_suites() -> Outcome {
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    let suites: [(&str, BoxFut); 5] = [
        ("state_machine_closure", Box::pin(closure_suite())),
        ("rank_uniqueness_random_faults", Box::pin(random_fault_suite(100))),
        ("fifo_per_user", Box::pin(fifo_suite())),
        ("filter_compliance", Box::pin(filter_suite())),
        ("aggregation_order_oracle", Box::pin(aggregation_suite())),
    ];
    for (name, fut) in suites {
        match fut.await {
            Ok(d) => lines.push(format!("    ok       {name}: {d}")),
            Err(d) => {
                lines.push(format!("    violated {name}: {d}"));
                bad.push(name);
            }
        }
    }
    for l in &lines {
        println!("{l}");
    }
    if bad.is_empty() {
        Ok("5 suites hold".into())
    } else {
        Err(format!("failing: {}", bad.join(", ")))
    }
}

/// The transition function against a table written out independently.
async fn closure_suite() -> Outcome {
    use RunEvent as E;
    use RunStatus as S;
    let table: &[(S, E, S)] = &[
        (S::Pending, E::Dispatched, S::Distributed),
        (S::Pending, E::CancelRequested, S::Canceled),
        (S::Distributed, E::BuildStarted, S::Building),
        (S::Distributed, E::BarrierWait, S::WaitingBarrier),
        (S::Distributed, E::Started, S::Running),
        (S::Building, E::BarrierWait, S::WaitingBarrier),
        (S::Building, E::Started, S::Running),
        (S::WaitingBarrier, E::Started, S::Running),
    ];
    let active = [S::Distributed, S::Building, S::WaitingBarrier, S::Running];
    let mut checked = 0;
    for from in S::ALL {
        for ev in E::ALL {
            let got = run_status_transition(from, ev).ok();
            let want = table
                .iter()
                .find(|(f, e, _)| *f == from && *e == ev)
                .map(|t| t.2)
                .or_else(|| match ev {
                    _ if !active.contains(&from) => None,
                    E::CancelRequested => Some(S::Canceled),
                    E::Succeeded if from == S::Running => Some(S::Success),
                    E::Failed => Some(S::Failed),
                    E::MarkedOrphan => Some(S::Orphaned),
                    _ => None,
                });
            ensure(got == want, || format!("{from} --{ev:?}--> {got:?}, table says {want:?}"))?;
            if let Some(to) = got {
                ensure(S::ALL.contains(&to), || format!("{to} outside the status set"))?;
            }
            checked += 1;
        }
    }
    for s in S::ALL.into_iter().filter(|s| s.is_terminal()) {
        ensure(E::ALL.into_iter().all(|e| run_status_transition(s, e).is_err()), || format!("{s} is not final"))?;
    }
    Ok(format!("{checked} (status, event) pairs match the table; terminal states absorb"))
}

fn random_script(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4usize);
    let clients = (0..n)
        .map(|_| ClientGroup {
            count: 1,
            client: ClientSpec { slots: rng.random_range(1..=2), ..ClientSpec::default() },
        })
        .collect();
    let mut sc = Scenario::empty(&format!("random-{seed}"));
    sc.timeout_s = 90.0;
    sc.cluster = ClusterDecl { seed, clients, ..ClusterDecl::default() };
    for user in &USERS[..2] {
        sc.processes.push(ProcessDecl {
            name: "w".into(),
            user: (*user).into(),
            job: Job::Sleep {
                seconds: rng.random_range(0.2..0.8),
                per_rank_s: 0.0,
                loops: 1,
                progress: false,
            },
        });
    }
    for _ in 0..rng.random_range(1..=3) {
        sc.submit.push(Submission {
            user: USERS[rng.random_range(0..2)].into(),
            process: "w".into(),
            repetitions: rng.random_range(1..=8),
            parallel: false,
            parameters: Vec::new(),
            shared_files: Vec::new(),
            rooms: Vec::new(),
            needs_gpu: false,
            same_machine: false,
            after_s: rng.random_range(0.0..1.0),
            after_request: None,
        });
    }
    // Client 0 never fails, so every request can finish.
    for target in 1..n {
        if !rng.random_bool(0.7) {
            continue;
        }
        let at = if rng.random_bool(0.5) {
            Trigger::Acked(1)
        } else {
            Trigger::AfterS(rng.random_range(0.0..2.0))
        };
        let kind = match rng.random_range(0..4) {
            0 => FaultKind::Disconnect,
            1 => FaultKind::Crash,
            2 => FaultKind::CpuLoad { pct: 75.0 },
            _ => FaultKind::UserLogin,
        };
        let index = sc.faults.len();
        let undo = match kind {
            FaultKind::Disconnect | FaultKind::Crash if rng.random_bool(0.6) => Some(FaultKind::Revive),
            FaultKind::CpuLoad { .. } => Some(FaultKind::CpuLoad { pct: 5.0 }),
            _ => None,
        };
        sc.faults.push(FaultEvent { at, target, kind });
        if let Some(kind) = undo {
            let delay_s = rng.random_range(0.5..3.0);
            sc.faults.push(FaultEvent { at: Trigger::AfterFault { index, delay_s }, target, kind });
        }
    }
    sc
}

/// Seeded random fault scripts, eight clusters at a time.
async fn random_fault_suite(runs: u64) -> Outcome {
    let mut set = tokio::task::JoinSet::new();
    let mut seeds = 1..=runs;
    let mut failures = Vec::new();
    let mut faults = 0;
    let mut requests = 0;
    loop {
        while set.len() < 8 {
            let Some(seed) = seeds.next() else { break };
            set.spawn(async move {
                let sc = random_script(seed);
                let r = async {
                    let (cluster, out) = play(&sc).await?;
                    completed(&out)?;
                    properties_hold(&cluster.trace())?;
                    Ok::<_, String>((out.fired.len(), out.requests.len()))
                }
                .await;
                (seed, r)
            });
        }
        let Some(done) = set.join_next().await else { break };
        match done {
            Ok((_, Ok((f, r)))) => {
                faults += f;
                requests += r;
            }
            Ok((seed, Err(e))) => failures.push(format!("seed {seed}: {e}")),
            Err(e) => failures.push(format!("task: {e}")),
        }
    }
    ensure(failures.is_empty(), || format!("{} of {runs} runs: {}", failures.len(), failures.join(" | ")))?;
    Ok(format!("{runs} seeded runs, {requests} requests, {faults} faults, all properties held"))
}

fn submission(user: &str, process: &str, reps: i64, after_s: f64) -> Submission {
    Submission {
        user: user.into(),
        process: process.into(),
        repetitions: reps,
        parallel: false,
        parameters: Vec::new(),
        shared_files: Vec::new(),
        rooms: Vec::new(),
        needs_gpu: false,
        same_machine: false,
        after_s,
        after_request: None,
    }
}

/// One slot, two users with queued requests: each user's requests start in
/// submission order.
async fn fifo_suite() -> Outcome {
    let mut sc = Scenario::empty("fifo");
    sc.cluster.clients = vec![ClientGroup { count: 1, client: ClientSpec::default() }];
    for user in ["alice", "bob"] {
        sc.processes.push(ProcessDecl {
            name: "w".into(),
            user: user.into(),
            job: Job::Sleep { seconds: 0.15, per_rank_s: 0.0, loops: 1, progress: false },
        });
    }
    sc.submit = vec![
        submission("alice", "w", 2, 0.0),
        submission("bob", "w", 2, 0.05),
        submission("alice", "w", 1, 0.1),
        submission("alice", "w", 3, 0.15),
        submission("bob", "w", 1, 0.2),
    ];
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    check(&cluster.trace(), Property::FifoPerUser).map_err(|v| v.to_string())?;
    // Direct oracle: the order of each user's first dispatches is the
    // order of their submissions.
    let mut owner = HashMap::new();
    for (i, s) in sc.submit.iter().enumerate() {
        owner.insert(out.requests[i], s.user.clone());
    }
    let mut first: Vec<RequestId> = Vec::new();
    for e in out.trace.events() {
        if let TraceEvent::DispatchSent { request_id, .. } = e {
            if !first.contains(request_id) {
                first.push(*request_id);
            }
        }
    }
    for user in ["alice", "bob"] {
        let submitted: Vec<RequestId> = out.requests.iter().copied().filter(|r| owner[r] == user).collect();
        let started: Vec<RequestId> = first.iter().copied().filter(|r| owner[r] == user).collect();
        ensure(submitted == started, || format!("{user}: submitted {submitted:?}, started {started:?}"))?;
    }
    Ok(format!("{} requests of 2 users started in submission order", out.requests.len()))
}

/// GPU, room and slot filters, checked against the cluster layout.
async fn filter_suite() -> Outcome {
    let mut sc = Scenario::empty("filters");
    let c = |has_gpu: bool, room: Option<&str>, slots: u32| ClientGroup {
        count: 1,
        client: ClientSpec { has_gpu, room: room.map(Into::into), slots, ..ClientSpec::default() },
    };
    sc.cluster.clients = vec![c(true, None, 1), c(false, None, 2), c(false, Some("Lab"), 1), c(true, Some("Lab"), 2)];
    sc.processes.push(ProcessDecl {
        name: "w".into(),
        user: "alice".into(),
        job: Job::Sleep { seconds: 0.2, per_rank_s: 0.0, loops: 1, progress: false },
    });
    let mut gpu = submission("alice", "w", 6, 0.0);
    gpu.needs_gpu = true;
    let mut lab = submission("alice", "w", 6, 0.0);
    lab.rooms = vec!["Lab".into()];
    let mut gpu_lab = submission("alice", "w", 4, 0.0);
    gpu_lab.rooms = vec!["Lab".into()];
    gpu_lab.needs_gpu = true;
    let public = submission("alice", "w", 8, 0.0);
    sc.submit = vec![gpu, lab, gpu_lab, public];
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let full = cluster.trace();
    check(&full, Property::FilterCompliance).map_err(|v| v.to_string())?;

    // Direct oracle from the declared layout.
    let layout: HashMap<ClientId, &ClientSpec> = cluster
        .nodes()
        .iter()
        .zip(&sc.cluster.clients)
        .map(|(n, g)| (n.client_id, &g.client))
        .collect();
    let mut active: HashMap<RunId, ClientId> = HashMap::new();
    let mut placements = 0;
    for e in out.trace.events() {
        match e {
            TraceEvent::DispatchAcked { request_id, client_id, .. } => {
                placements += 1;
                let i = out.requests.iter().position(|r| r == request_id).ok_or("unknown request")?;
                let s = &sc.submit[i];
                let spec = layout[client_id];
                let room = spec.room.as_deref().unwrap_or("Public");
                let rooms: Vec<&str> = if s.rooms.is_empty() { vec!["Public"] } else { s.rooms.iter().map(String::as_str).collect() };
                ensure(!s.needs_gpu || spec.has_gpu, || format!("GPU request {i} placed on a GPU-less client"))?;
                ensure(rooms.contains(&room), || format!("request {i} placed in room {room}"))?;
            }
            TraceEvent::RunTransition { run_id, client_id: Some(c), to, .. } => {
                if to.is_active() {
                    active.insert(*run_id, *c);
                } else {
                    active.remove(run_id);
                }
                let busy = active.values().filter(|x| *x == c).count() as u32;
                ensure(busy <= layout[c].slots, || format!("client {c} ran {busy} runs at once"))?;
            }
            _ => {}
        }
    }
    Ok(format!("{placements} placements respected GPU, room and slot limits"))
}

/// Completion order scrambled against rank order; the merged console must
/// still equal the oracle built from per-run bundles.
async fn aggregation_suite() -> Outcome {
    let mut sc = Scenario::empty("aggregation");
    sc.cluster.clients = vec![ClientGroup { count: 6, client: ClientSpec { slots: 2, ..ClientSpec::default() } }];
    sc.processes.push(ProcessDecl {
        name: "w".into(),
        user: "alice".into(),
        job: Job::Sleep { seconds: 0.6, per_rank_s: -0.02, loops: 1, progress: false },
    });
    sc.submit = vec![submission("alice", "w", 24, 0.0)];
    let (cluster, out) = play(&sc).await?;
    completed(&out)?;
    let id = out.requests[0];
    let arrival: Vec<u32> = success_rows(&out.trace, id).iter().map(|w| w.0).collect();
    let n = aggregation_matches(&cluster, "alice", id).await?;
    let inversions = arrival.windows(2).filter(|w| w[0] > w[1]).count();
    ensure(inversions > 0, || "results arrived in rank order; the check proves nothing".into())?;
    Ok(format!("{n} ranks, {inversions} out-of-order arrivals, merged console equals oracle"))
}
