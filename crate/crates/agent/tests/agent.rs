use std::sync::Arc;
use std::time::Duration;

use gridforge_agent::{AgentConfig, AgentHandle, ScriptedSampler};
use gridforge_client::ApiClient;
use gridforge_core::archive::read_entries;
use gridforge_core::events::noop_sink;
use gridforge_core::wire::{CreateDomain, CreateProcess};
use gridforge_core::{
    ClientConfig, ClientId, DomainOrigin, PayloadKind, RequestForm, RequestId, RequestStatus, RoomId, RunStatus,
};
use gridforge_executor::{Executor, SandboxExecutor};
use gridforge_manager::config::{MonitorPeriods, Role, TokenEntry};
use gridforge_manager::{serve, Manager, ManagerConfig, ManagerHandle, NoHooks};

async fn manager() -> ManagerHandle {
    let cfg = ManagerConfig {
        tokens: vec![
            TokenEntry { token: "root".into(), role: Role::Admin, user: None },
            TokenEntry { token: "alice".into(), role: Role::User, user: Some("alice".into()) },
            TokenEntry { token: "agent".into(), role: Role::Agent, user: None },
        ],
        periods: MonitorPeriods { liveness_s: 0.5, supervision_s: 0.5, scheduler_s: 0.1 },
        ..ManagerConfig::default()
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    serve(Manager::open(cfg, noop_sink(), Arc::new(NoHooks)).unwrap(), listener).await.unwrap()
}

fn agent_cfg(url: &str, id: &str, workdir: &std::path::Path, slots: u32) -> AgentConfig {
    AgentConfig {
        manager_url: url.into(),
        token: "agent".into(),
        agent_id: id.into(),
        workdir: workdir.into(),
        cores: 2,
        ram_mb: 1000,
        client: ClientConfig {
            max_concurrent_runs: slots,
            heartbeat_interval_s: 0.2,
            cancellation_poll_interval_s: 0.1,
            ..ClientConfig::default()
        },
        barrier_poll_s: 0.1,
        exec_poll_s: 0.05,
        kill_grace_s: 0.5,
        ..AgentConfig::default()
    }
}

async fn start_agent(cfg: AgentConfig, exec: Arc<dyn Executor>, sampler: Arc<ScriptedSampler>) -> AgentHandle {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    gridforge_agent::start(cfg, exec, sampler, noop_sink(), listener).await.unwrap()
}

async fn admit(m: &ManagerHandle, client: ClientId) {
    ApiClient::new(&m.url(), "root").assign_client(RoomId(1), client).await.unwrap();
}

/// A shell domain and a script process named `name`.
async fn shell_process(alice: &ApiClient, name: &str, script: &str) {
    if alice.domains().await.unwrap().iter().all(|d| d.name != "Shell") {
        alice
            .create_domain(&CreateDomain {
                name: "Shell".into(),
                build_recipe: "FROM busybox\n".into(),
                dependency_manifest: "true\n".into(),
                entry_template: "sh {entry}".into(),
                origin: DomainOrigin::User,
            })
            .await
            .unwrap();
    }
    alice
        .create_process(&CreateProcess {
            name: name.into(),
            payload_kind: PayloadKind::SingleFile,
            payload: script.as_bytes().to_vec(),
            file_name: Some("main.sh".into()),
            entry_command: None,
            domain: Some("Shell".into()),
            entry_file: None,
        })
        .await
        .unwrap();
}

fn form(process: &str, reps: i64) -> RequestForm {
    RequestForm {
        domain: "Shell".into(),
        process: process.into(),
        repetitions: reps,
        rooms: vec!["Public".into()],
        ..RequestForm::default()
    }
}

async fn wait_terminal(api: &ApiClient, id: RequestId, limit: Duration) -> RequestStatus {
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        let st = api.request(id).await.unwrap().request.status;
        if st.is_terminal() || tokio::time::Instant::now() > deadline {
            return st;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

/// Rank is the fourth header pair: `--rank N`.
const ECHO_RANK: &str = "while [ $# -gt 0 ]; do [ \"$1\" = --rank ] && r=$2; shift; done\necho \"rank $r\"\n";

#[tokio::test]
async fn runs_requests_end_to_end() {
    let m = manager().await;
    let dir = tempfile::tempdir().unwrap();
    let exec: Arc<dyn Executor> = Arc::new(SandboxExecutor::new(dir.path().join("exec"), Duration::from_millis(500)).unwrap());
    let a = start_agent(agent_cfg(&m.url(), "pc1", &dir.path().join("a"), 2), exec, Arc::new(ScriptedSampler::new(5.0))).await;
    admit(&m, a.agent().client_id().unwrap()).await;

    let alice = ApiClient::new(&m.url(), "alice");
    shell_process(&alice, "echo-rank", ECHO_RANK).await;
    let id = alice.submit(&form("echo-rank", 3)).await.unwrap();
    assert_eq!(wait_terminal(&alice, id, Duration::from_secs(30)).await, RequestStatus::Completed);

    let table = alice.runs(id).await.unwrap();
    let mut ranks: Vec<u32> = table.runs.iter().filter(|r| r.status == RunStatus::Success).map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, vec![0, 1, 2]);

    let bundle = alice.request_bundle(id, false).await.unwrap();
    let entries = read_entries(&bundle).unwrap();
    let merged = entries.iter().find(|(p, _)| p == "merged_output.txt").expect("merged console");
    assert_eq!(
        String::from_utf8_lossy(&merged.1),
        "==> rank 0 <==\nrank 0\n==> rank 1 <==\nrank 1\n==> rank 2 <==\nrank 2\n"
    );
    // The image was built once for all three runs.
    assert_eq!(std::fs::read_dir(dir.path().join("exec/images")).unwrap().filter(|e| {
        !e.as_ref().unwrap().file_name().to_string_lossy().starts_with('.')
    }).count(), 1);
    a.shutdown(true).await;
    m.shutdown().await;
}

#[tokio::test]
async fn busy_host_refuses_until_load_drops() {
    let m = manager().await;
    let dir = tempfile::tempdir().unwrap();
    let exec: Arc<dyn Executor> = Arc::new(SandboxExecutor::new(dir.path().join("exec"), Duration::from_millis(500)).unwrap());
    let sampler = Arc::new(ScriptedSampler::new(90.0));
    let a = start_agent(agent_cfg(&m.url(), "pc1", &dir.path().join("a"), 1), exec, sampler.clone()).await;
    assert!(!a.agent().accepting_new());
    admit(&m, a.agent().client_id().unwrap()).await;

    let alice = ApiClient::new(&m.url(), "alice");
    shell_process(&alice, "echo-rank", ECHO_RANK).await;
    let id = alice.submit(&form("echo-rank", 1)).await.unwrap();
    tokio::time::sleep(Duration::from_millis(800)).await;
    let table = alice.runs(id).await.unwrap();
    assert!(table.runs.iter().all(|r| r.client_id.is_none()), "{table:?}");

    sampler.set_cpu(20.0);
    assert_eq!(wait_terminal(&alice, id, Duration::from_secs(30)).await, RequestStatus::Completed);
    a.shutdown(true).await;
    m.shutdown().await;
}

#[tokio::test]
async fn crashed_agent_delivers_after_restart() {
    let m = manager().await;
    let dir = tempfile::tempdir().unwrap();
    let exec: Arc<dyn Executor> = Arc::new(SandboxExecutor::new(dir.path().join("exec"), Duration::from_millis(500)).unwrap());
    let sampler = Arc::new(ScriptedSampler::new(5.0));
    let cfg = agent_cfg(&m.url(), "pc1", &dir.path().join("a"), 1);
    let a = start_agent(cfg.clone(), exec.clone(), sampler.clone()).await;
    let client = a.agent().client_id().unwrap();
    admit(&m, client).await;

    let alice = ApiClient::new(&m.url(), "alice");
    shell_process(&alice, "slow", "sleep 1\necho done\n").await;
    let id = alice.submit(&form("slow", 1)).await.unwrap();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
    while alice.runs(id).await.unwrap().runs[0].status != RunStatus::Running {
        assert!(tokio::time::Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    a.crash();

    let b = start_agent(cfg, exec, sampler).await;
    assert_eq!(b.agent().client_id(), Some(client));
    assert_eq!(wait_terminal(&alice, id, Duration::from_secs(30)).await, RequestStatus::Completed);
    let runs = alice.runs(id).await.unwrap().runs;
    assert_eq!(runs.len(), 1, "the execution was adopted, not redone: {runs:?}");
    b.shutdown(true).await;
    m.shutdown().await;
}

#[tokio::test]
async fn cancellation_kills_the_execution() {
    let m = manager().await;
    let dir = tempfile::tempdir().unwrap();
    let exec: Arc<dyn Executor> = Arc::new(SandboxExecutor::new(dir.path().join("exec"), Duration::from_millis(500)).unwrap());
    let a = start_agent(agent_cfg(&m.url(), "pc1", &dir.path().join("a"), 1), exec, Arc::new(ScriptedSampler::new(5.0))).await;
    admit(&m, a.agent().client_id().unwrap()).await;

    let alice = ApiClient::new(&m.url(), "alice");
    shell_process(&alice, "forever", "sleep 60\n").await;
    let id = alice.submit(&form("forever", 1)).await.unwrap();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
    while alice.runs(id).await.unwrap().runs[0].status != RunStatus::Running {
        assert!(tokio::time::Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    alice.cancel(id).await.unwrap();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    loop {
        let views = a.agent().run_views();
        if views.iter().all(|v| v.local_status == RunStatus::Canceled) {
            break;
        }
        assert!(tokio::time::Instant::now() < deadline, "{views:?}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(alice.request(id).await.unwrap().request.status, RequestStatus::Canceled);
    a.shutdown(false).await;
    m.shutdown().await;
}
