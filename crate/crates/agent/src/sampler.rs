//! Host resource sampling.

use std::fs;
use std::io;
use std::process::{Command, Stdio};

use gridforge_core::time::now_ms;
use gridforge_core::ResourceSnapshot;
use parking_lot::Mutex;

pub trait Sampler: Send + Sync {
    fn sample(&self) -> io::Result<ResourceSnapshot>;
}

/// Reads `/proc` and scans login sessions with `who`.
#[derive(Default)]
pub struct ProcSampler {
    last_cpu: Mutex<Option<(u64, u64)>>,
}

fn cpu_times() -> io::Result<(u64, u64)> {
    let stat = fs::read_to_string("/proc/stat")?;
    let line = stat
        .lines()
        .find(|l| l.starts_with("cpu "))
        .ok_or_else(|| io::Error::other("no cpu line in /proc/stat"))?;
    let v: Vec<u64> = line.split_whitespace().skip(1).filter_map(|x| x.parse().ok()).collect();
    if v.len() < 4 {
        return Err(io::Error::other("short cpu line"));
    }
    let idle = v[3] + v.get(4).copied().unwrap_or(0);
    Ok((v.iter().sum(), idle))
}

fn ram_pct() -> io::Result<f64> {
    let info = fs::read_to_string("/proc/meminfo")?;
    let field = |name: &str| -> Option<f64> {
        info.lines()
            .find(|l| l.starts_with(name))?
            .split_whitespace()
            .nth(1)?
            .parse()
            .ok()
    };
    match (field("MemTotal:"), field("MemAvailable:")) {
        (Some(total), Some(avail)) if total > 0.0 => Ok(100.0 * (total - avail) / total),
        _ => Err(io::Error::other("unreadable /proc/meminfo")),
    }
}

fn interactive_session() -> bool {
    Command::new("who")
        .stdin(Stdio::null())
        .stderr(Stdio::null())
        .output()
        .map(|o| o.status.success() && !o.stdout.iter().all(u8::is_ascii_whitespace))
        .unwrap_or(false)
}

impl Sampler for ProcSampler {
    fn sample(&self) -> io::Result<ResourceSnapshot> {
        let (total, idle) = cpu_times()?;
        let cpu_pct = match self.last_cpu.lock().replace((total, idle)) {
            Some((t0, i0)) if total > t0 => {
                100.0 * (1.0 - (idle.saturating_sub(i0)) as f64 / (total - t0) as f64)
            }
            _ => 0.0,
        };
        Ok(ResourceSnapshot {
            cpu_pct,
            ram_pct: ram_pct()?,
            gpu_ram_pct: None,
            interactive_user_present: interactive_session(),
            taken_at: now_ms(),
            stale: false,
        }
        .clamped())
    }
}

/// Values set by a test or simulation harness.
pub struct ScriptedSampler {
    state: Mutex<ResourceSnapshot>,
    fail: Mutex<bool>,
}

impl ScriptedSampler {
    pub fn new(cpu_pct: f64) -> Self {
        ScriptedSampler {
            state: Mutex::new(ResourceSnapshot {
                cpu_pct,
                ram_pct: 20.0,
                gpu_ram_pct: None,
                interactive_user_present: false,
                taken_at: 0,
                stale: false,
            }),
            fail: Mutex::new(false),
        }
    }

    pub fn set_cpu(&self, pct: f64) {
        self.state.lock().cpu_pct = pct;
    }

    pub fn set_interactive(&self, present: bool) {
        self.state.lock().interactive_user_present = present;
    }

    pub fn set_failing(&self, fail: bool) {
        *self.fail.lock() = fail;
    }
}

impl Sampler for ScriptedSampler {
    fn sample(&self) -> io::Result<ResourceSnapshot> {
        if *self.fail.lock() {
            return Err(io::Error::other("scripted sampler failure"));
        }
        let mut s = self.state.lock().clone();
        s.taken_at = now_ms();
        Ok(s.clamped())
    }
}
