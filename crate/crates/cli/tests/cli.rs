use std::path::Path;
use std::process::Output;
use std::sync::Arc;
use std::time::Duration;

use gridforge_agent::{AgentConfig, ScriptedSampler};
use gridforge_core::events::noop_sink;
use gridforge_core::ClientConfig;
use gridforge_executor::SandboxExecutor;
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

struct Cli {
    url: String,
    home: tempfile::TempDir,
}

impl Cli {
    /// Runs the binary off the async runtime so the in-process manager keeps serving.
    async fn run(&self, token: &str, args: &[&str]) -> Output {
        let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_gridforge"));
        cmd.args(args)
            .env_remove("GRIDFORGE_CONFIG")
            .env("HOME", self.home.path())
            .env("XDG_CONFIG_HOME", self.home.path())
            .env("GRIDFORGE_URL", &self.url)
            .env("GRIDFORGE_TOKEN", token);
        tokio::task::spawn_blocking(move || cmd.output().unwrap()).await.unwrap()
    }

    async fn ok(&self, token: &str, args: &[&str]) -> String {
        let out = self.run(token, args).await;
        assert!(
            out.status.success(),
            "gridforge {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const ECHO_RANK: &str = "while [ $# -gt 0 ]; do [ \"$1\" = --rank ] && r=$2; shift; done\necho \"rank $r\"\n";

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn request_lifecycle_through_the_cli() {
    let m = manager().await;
    let dir = tempfile::tempdir().unwrap();
    let exec = Arc::new(SandboxExecutor::new(dir.path().join("exec"), Duration::from_millis(500)).unwrap());
    let cfg = AgentConfig {
        manager_url: m.url(),
        token: "agent".into(),
        agent_id: "pc1".into(),
        workdir: dir.path().join("agent"),
        cores: 2,
        ram_mb: 1000,
        client: ClientConfig {
            max_concurrent_runs: 2,
            heartbeat_interval_s: 0.2,
            cancellation_poll_interval_s: 0.1,
            ..ClientConfig::default()
        },
        exec_poll_s: 0.05,
        ..AgentConfig::default()
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let agent = gridforge_agent::start(cfg, exec, Arc::new(ScriptedSampler::new(5.0)), noop_sink(), listener)
        .await
        .unwrap();
    let client = agent.agent().client_id().unwrap().to_string();
    let cli = Cli { url: m.url(), home: tempfile::tempdir().unwrap() };

    let assigned = cli.ok("root", &["--porcelain", "rooms", "assign", "Public", &client]).await;
    assert_eq!(assigned, format!("1\t{client}\n"));
    let clients = cli.ok("root", &["--porcelain", "clients"]).await;
    assert!(clients.starts_with(&format!("{client}\tpc1\tPublic\t")), "{clients}");

    let recipe = write(dir.path(), "recipe", "FROM busybox\n");
    let manifest = write(dir.path(), "manifest", "true\n");
    let script = write(dir.path(), "main.sh", ECHO_RANK);
    cli.ok(
        "alice",
        &["domains", "create", "--name", "Shell", "--recipe", &recipe, "--manifest", &manifest, "--template", "sh {entry}"],
    )
    .await;
    cli.ok("alice", &["processes", "create", "--name", "echo", "--payload", &script, "--domain", "Shell"]).await;

    let out = cli
        .ok(
            "alice",
            &["--porcelain", "submit", "--domain", "Shell", "--process", "echo", "-n", "3", "--room", "Public", "--watch", "--interval", "0.1"],
        )
        .await;
    let lines: Vec<&str> = out.lines().collect();
    let id = lines[0].to_string();
    assert_eq!(*lines.last().unwrap(), format!("{id}\tCompleted\t3\t3"));

    let table = cli.ok("alice", &["--porcelain", "status", &id]).await;
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    let mut ranks: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    ranks.sort();
    assert_eq!(ranks, ["0", "1", "2"]);
    assert!(rows.iter().all(|r| r[2] == client && r[3] == "3" && r[4] == "Success"));
    let human = cli.ok("alice", &["status", &id]).await;
    assert!(human.starts_with("id | rank | client_id | status | obs\n"));

    let dest = dir.path().join("dl");
    let dest_s = dest.to_string_lossy().into_owned();
    cli.ok("alice", &["download", &id, "--dest", &dest_s]).await;
    assert_eq!(
        std::fs::read_to_string(dest.join(format!("request-{id}-merged_output.txt"))).unwrap(),
        "==> rank 0 <==\nrank 0\n==> rank 1 <==\nrank 1\n==> rank 2 <==\nrank 2\n"
    );
    let archive = std::fs::read(dest.join(format!("request-{id}.tar.gz"))).unwrap();
    let files = gridforge_core::archive::list_files(&archive).unwrap();
    assert!(files.contains(&"rank_2/output.txt".to_string()), "{files:?}");

    let run = rows[0][0];
    let path = cli.ok("alice", &["runs", "download", run, "--dest", &dest_s]).await;
    let bytes = std::fs::read(path.trim()).unwrap();
    let entries = gridforge_core::archive::read_entries(&bytes).unwrap();
    assert_eq!(entries[0].1, format!("rank {}\n", rows[0][1]).into_bytes());

    // A room nobody serves keeps the request queued.
    cli.ok("alice", &["rooms", "create", "Empty"]).await;
    let queued = cli
        .ok("alice", &["submit", "--domain", "Shell", "--process", "echo", "-n", "1", "--room", "Empty"])
        .await;
    let queued = queued.trim();
    let early = cli.run("alice", &["download", queued, "--dest", &dest_s]).await;
    assert_eq!(early.status.code(), Some(4), "{}", String::from_utf8_lossy(&early.stderr));
    let canceled = cli.ok("alice", &["--porcelain", "cancel", queued]).await;
    assert_eq!(canceled, format!("{queued}\tCanceled\t0\t1\n"));

    agent.shutdown(true).await;
    m.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_map_to_exit_codes() {
    let m = manager().await;
    let cli = Cli { url: m.url(), home: tempfile::tempdir().unwrap() };

    let zero = cli.run("alice", &["submit", "--domain", "x", "--process", "y", "-n", "0", "--room", "Public"]).await;
    assert_eq!(zero.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&zero.stderr).contains("repetitions"));

    let unknown = cli.run("alice", &["status", "999"]).await;
    assert_eq!(unknown.status.code(), Some(2));

    let bad_token = cli.run("s3cret-token", &["requests"]).await;
    assert_eq!(bad_token.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&bad_token.stderr).contains("s3cret-token"));

    let registered = gridforge_client::ApiClient::new(&m.url(), "agent")
        .register(&gridforge_core::wire::RegisterClient {
            agent_id: "lab-pc".into(),
            address: "127.0.0.1:9".into(),
            has_gpu: false,
            cores: 2,
            ram_mb: 1000,
            config: ClientConfig::default(),
        })
        .await
        .unwrap();
    let not_admin = cli.run("alice", &["rooms", "assign", "Public", &registered.client_id.to_string()]).await;
    assert_eq!(not_admin.status.code(), Some(3));

    m.shutdown().await;
    let down = cli.run("alice", &["requests"]).await;
    assert_eq!(down.status.code(), Some(1));
}

#[tokio::test]
async fn config_file_and_header_need_no_manager() {
    let home = tempfile::tempdir().unwrap();
    let cli = Cli { url: String::new(), home };
    let snippet = cli.ok("", &["header", "python"]).await;
    assert!(snippet.contains("--rank"));

    let missing = cli.run("", &["requests"]).await;
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("GRIDFORGE_URL"));

    let dir = cli.home.path().join("gridforge");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("cli.toml"), "url = \"http://127.0.0.1:1\"\ntoken = \"from-file\"\n").unwrap();
    // The file supplies both; the unreachable URL turns into a transport failure.
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_gridforge"));
    cmd.arg("requests")
        .env_remove("GRIDFORGE_URL")
        .env_remove("GRIDFORGE_TOKEN")
        .env_remove("GRIDFORGE_CONFIG")
        .env("XDG_CONFIG_HOME", cli.home.path());
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("from-file"));
}
