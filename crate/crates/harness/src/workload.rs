//! Synthetic user code run by the harness in place of real scientific
//! workloads.
//!
//! A job is a small TOML file shipped as the process payload; the workload
//! binary reads it, parses the run header from the remaining arguments and
//! behaves accordingly. Everything it prints lands in the run's console.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use gridforge_core::hash::sha256_hex;
use gridforge_core::RunHeader;
use serde::{Deserialize, Serialize};

/// Divides every sleep of the workload; emulates faster or slower hosts.
pub const SPEED_ENV: &str = "GRIDFORGE_SPEED_FACTOR";
pub const PROGRESS_ENV: &str = "GRIDFORGE_PROGRESS_URL";
pub const JOB_FILE: &str = "job.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Job {
    /// Writes `text` to stdout verbatim.
    Print { text: String },
    /// Sleeps `seconds + rank * per_rank_s`, `loops` times over.
    Sleep {
        seconds: f64,
        #[serde(default)]
        per_rank_s: f64,
        #[serde(default = "one")]
        loops: u32,
        #[serde(default)]
        progress: bool,
    },
    /// Exits with `code`, after an optional sleep.
    Exit {
        code: i32,
        #[serde(default)]
        after_s: f64,
    },
    /// Counts to `steps`, saving progress after each one. When `crash_at`
    /// is set the first launch dies abnormally once that step is saved.
    Checkpoint {
        steps: u32,
        #[serde(default)]
        step_s: f64,
        #[serde(default)]
        crash_at: Option<u32>,
    },
    /// Rank 0 echoes one line per peer; other ranks connect to it.
    Rendezvous {
        #[serde(default = "rendezvous_timeout")]
        timeout_s: f64,
    },
    /// Prints the digest of each named shared file and checks it is
    /// read-only from inside the run.
    ReadShared {
        files: Vec<String>,
        #[serde(default)]
        sleep_s: f64,
    },
    /// Tries to write to `path`, which should be outside the run's
    /// directories.
    Escape { path: String },
}

fn one() -> u32 {
    1
}

fn rendezvous_timeout() -> f64 {
    20.0
}

impl Job {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("job serializes")
    }

    pub fn from_toml(text: &str) -> Result<Job, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

pub struct Env {
    pub speed: f64,
    pub progress_url: Option<String>,
}

impl Env {
    pub fn from_process() -> Env {
        Env {
            speed: std::env::var(SPEED_ENV)
                .ok()
                .and_then(|v| v.parse().ok())
                .filter(|v: &f64| *v > 0.0)
                .unwrap_or(1.0),
            progress_url: std::env::var(PROGRESS_ENV).ok(),
        }
    }

    fn sleep(&self, secs: f64) {
        if secs > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(secs / self.speed));
        }
    }
}

/// Runs `job` and returns the process exit code.
pub fn run(job: &Job, header: &RunHeader, env: &Env, out: &mut dyn Write) -> i32 {
    match execute(job, header, env, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "workload error: {e}");
            1
        }
    }
}

fn execute(job: &Job, h: &RunHeader, env: &Env, out: &mut dyn Write) -> std::io::Result<i32> {
    match job {
        Job::Print { text } => {
            out.write_all(text.as_bytes())?;
            Ok(0)
        }
        Job::Sleep {
            seconds,
            per_rank_s,
            loops,
            progress,
        } => {
            let each = seconds + per_rank_s * h.rank as f64;
            for i in 0..*loops {
                env.sleep(each);
                if *progress {
                    post_progress(env, &format!("loop {}", i + 1), 100.0 * (i + 1) as f64 / *loops as f64);
                }
            }
            writeln!(out, "rank {} slept {} x {:.3}s", h.rank, loops, each)?;
            Ok(0)
        }
        Job::Exit { code, after_s } => {
            env.sleep(*after_s);
            writeln!(out, "rank {} exiting with {}", h.rank, code)?;
            Ok(*code)
        }
        Job::Checkpoint {
            steps,
            step_s,
            crash_at,
        } => checkpoint(h, env, out, *steps, *step_s, *crash_at),
        Job::Rendezvous { timeout_s } => rendezvous(h, out, Duration::from_secs_f64(*timeout_s)),
        Job::ReadShared { files, sleep_s } => {
            for name in files {
                let path = Path::new(&h.app_dir).join(name);
                let bytes = std::fs::read(&path)?;
                let writable = std::fs::OpenOptions::new().append(true).open(&path).is_ok();
                writeln!(out, "{name} {} {}", sha256_hex(&bytes), if writable { "writable" } else { "read-only" })?;
            }
            env.sleep(*sleep_s);
            Ok(0)
        }
        Job::Escape { path } => {
            match std::fs::write(path, b"escaped") {
                Ok(()) => writeln!(out, "escaped: wrote {path}")?,
                Err(e) => writeln!(out, "blocked: {e}")?,
            }
            Ok(0)
        }
    }
}

fn checkpoint(
    h: &RunHeader,
    env: &Env,
    out: &mut dyn Write,
    steps: u32,
    step_s: f64,
    crash_at: Option<u32>,
) -> std::io::Result<i32> {
    let dir = Path::new(&h.checkpoint_dir);
    let progress_file = dir.join("progress");
    let marker = dir.join("crashed-once");
    let start: u32 = std::fs::read_to_string(&progress_file)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0);
    writeln!(out, "start {start}")?;
    out.flush()?;
    for i in start..steps {
        env.sleep(step_s);
        let tmp = dir.join("progress.tmp");
        std::fs::write(&tmp, format!("{}\n", i + 1))?;
        std::fs::rename(&tmp, &progress_file)?;
        if crash_at == Some(i + 1) && !marker.exists() {
            std::fs::write(&marker, b"")?;
            writeln!(out, "crash after {}", i + 1)?;
            out.flush()?;
            return Ok(70);
        }
    }
    std::fs::write(Path::new(&h.output_dir).join("result.txt"), format!("{steps}\n"))?;
    writeln!(out, "done {steps}")?;
    Ok(0)
}

fn rendezvous(h: &RunHeader, out: &mut dyn Write, timeout: Duration) -> std::io::Result<i32> {
    let deadline = Instant::now() + timeout;
    if h.rank == 0 {
        let listener = TcpListener::bind(("0.0.0.0", h.master_port))?;
        listener.set_nonblocking(true)?;
        let mut served = 0;
        while served + 1 < h.repetitions {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
                    let mut line = String::new();
                    BufReader::new(&stream).read_line(&mut line)?;
                    (&stream).write_all(line.as_bytes())?;
                    write!(out, "rank 0 echoed: {line}")?;
                    served += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        writeln!(out, "rank 0 timed out after {served} peers")?;
                        return Ok(1);
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(e),
            }
        }
        writeln!(out, "rank 0 served {served}")?;
        return Ok(0);
    }
    let target = format!("{}:{}", h.master_addr, h.master_port);
    let stream = loop {
        match TcpStream::connect(&target) {
            Ok(s) => break s,
            Err(e) if Instant::now() > deadline => {
                writeln!(out, "rank {} could not reach {target}: {e}", h.rank)?;
                return Ok(1);
            }
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    };
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let msg = format!("hello from rank {}\n", h.rank);
    (&stream).write_all(msg.as_bytes())?;
    let mut echo = String::new();
    BufReader::new(&stream).read_line(&mut echo)?;
    if echo == msg {
        writeln!(out, "rank {} echo ok via {target}", h.rank)?;
        Ok(0)
    } else {
        writeln!(out, "rank {} bad echo {echo:?}", h.rank)?;
        Ok(1)
    }
}

/// Best-effort progress report to the local agent.
fn post_progress(env: &Env, message: &str, percent: f64) {
    let Some(url) = env.progress_url.as_deref() else {
        return;
    };
    let Some(rest) = url.strip_prefix("http://") else {
        return;
    };
    let (host, path) = rest.split_once('/').map(|(h, p)| (h, format!("/{p}"))).unwrap_or((rest, "/".into()));
    let body = serde_json::json!({ "message": message, "percent": percent }).to_string();
    let Ok(mut s) = TcpStream::connect(host) else {
        return;
    };
    let _ = s.set_read_timeout(Some(Duration::from_secs(2)));
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    if s.write_all(req.as_bytes()).is_ok() {
        let mut sink = Vec::new();
        let _ = std::io::Read::read_to_end(&mut s, &mut sink);
    }
}
