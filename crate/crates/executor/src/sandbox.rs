use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::symlink;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use gridforge_core::hash::domain_content_hash;
use serde::{Deserialize, Serialize};

use crate::landlock::{restrict_self, WriteRuleset};
use crate::procs::ProcessTable;
use crate::recipe::parse_recipe;
use crate::spec::{ExecHandle, ExecSpec, ExecState, GuestDirs, HandleId, ImageRef, Mounts};
use crate::{ExecError, Executor};

const READY_MARKER: &str = ".ready";
const IMAGE_META: &str = ".image.json";
const BUILD_LOG: &str = ".build.log";
const SYSTEM_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    base: String,
    env: Vec<(String, String)>,
}

/// Runs user code as a confined subprocess.
///
/// An image is a directory under `<root>/images/<content_hash>` produced by
/// running the dependency manifest with `sh` (with `IMAGE_DIR` pointing at
/// the directory being built). Its `bin/` is put first on the run's `PATH`.
///
/// Each run gets a fresh session, a `nice` level derived from its cpu
/// share, an address-space limit from its memory cap, and (when the kernel
/// supports Landlock) write access restricted to its three directories.
pub struct SandboxExecutor {
    root: PathBuf,
    procs: ProcessTable,
    building: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    tmp_seq: AtomicU64,
}

impl SandboxExecutor {
    pub fn new(root: impl Into<PathBuf>, kill_grace: Duration) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("images"))?;
        Ok(SandboxExecutor {
            root,
            procs: ProcessTable::new("sbx", kill_grace),
            building: Mutex::new(HashMap::new()),
            tmp_seq: AtomicU64::new(0),
        })
    }

    fn image_dir(&self, hash: &str) -> PathBuf {
        self.root.join("images").join(hash)
    }

    fn load_image(&self, hash: &str) -> Option<ImageRef> {
        let dir = self.image_dir(hash);
        if !dir.join(READY_MARKER).exists() {
            return None;
        }
        let meta: ImageMeta =
            serde_json::from_slice(&fs::read(dir.join(IMAGE_META)).ok()?).ok()?;
        Some(ImageRef {
            backend: "sandbox".into(),
            content_hash: hash.to_string(),
            location: dir.to_string_lossy().into_owned(),
            base: meta.base,
            env: meta.env,
        })
    }

    fn build_fresh(&self, hash: &str, recipe: &str, manifest: &str) -> Result<ImageRef, ExecError> {
        let parsed = parse_recipe(recipe)?;
        let n = self.tmp_seq.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .root
            .join("images")
            .join(format!(".tmp-{hash}-{}-{n}", std::process::id()));
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir_all(tmp.join("bin"))?;
        let script = tmp.join(".manifest.sh");
        fs::write(&script, manifest)?;

        let log_path = tmp.join(BUILD_LOG);
        let log = File::create(&log_path)?;
        let mut cmd = Command::new("sh");
        cmd.arg(&script)
            .current_dir(&tmp)
            .env_clear()
            .env("PATH", format!("{}:{SYSTEM_PATH}", tmp.join("bin").display()))
            .env("HOME", &tmp)
            .env("IMAGE_DIR", &tmp)
            .envs(parsed.env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log);
        let status = cmd.status()?;
        if !status.success() {
            let log = fs::read_to_string(&log_path).unwrap_or_default();
            let _ = fs::remove_dir_all(&tmp);
            return Err(ExecError::BuildFailed {
                log: format!("manifest exited with {status}\n{log}"),
            });
        }

        let meta = ImageMeta {
            base: parsed.base,
            env: parsed.env,
        };
        fs::write(tmp.join(IMAGE_META), serde_json::to_vec(&meta).map_err(io::Error::other)?)?;
        let dest = self.image_dir(hash);
        let _ = fs::remove_dir_all(&dest);
        fs::rename(&tmp, &dest)?;
        File::create(dest.join(READY_MARKER))?.sync_all()?;
        self.load_image(hash)
            .ok_or_else(|| ExecError::BuildFailed { log: "image vanished after build".into() })
    }

    fn command_for(&self, spec: &ExecSpec) -> Result<(Command, Option<WriteRuleset>), ExecError> {
        let m = &spec.mounts;
        for (what, dir) in [
            ("app_dir", &m.app_dir),
            ("checkpoint_dir", &m.checkpoint_dir),
            ("output_dir", &m.output_dir),
        ] {
            if !dir.is_dir() {
                return Err(ExecError::StartFailed(format!("{what} {} does not exist", dir.display())));
            }
        }
        let Some((program, args)) = spec.entry_command.split_first() else {
            return Err(ExecError::StartFailed("empty entry command".into()));
        };
        for shared in &m.shared {
            link_shared(&m.app_dir, &shared.host_path, &shared.name)?;
        }

        let console = OpenOptions::new()
            .create(true)
            .append(true)
            .open(spec.console_path())?;
        let image_dir = Path::new(&spec.image.location);
        let mut cmd = Command::new(program);
        cmd.args(args)
            .args(&spec.args)
            .current_dir(&m.app_dir)
            .env_clear()
            .env("PATH", format!("{}:{SYSTEM_PATH}", image_dir.join("bin").display()))
            .env("HOME", &m.app_dir)
            .env("TMPDIR", &m.app_dir)
            .env("IMAGE_DIR", image_dir)
            .envs(spec.image.env.iter().map(|(k, v)| (k, v)))
            .envs(spec.env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::null())
            .stdout(console.try_clone()?)
            .stderr(console);

        let ruleset = WriteRuleset::new(
            &[&m.app_dir, &m.checkpoint_dir, &m.output_dir],
            &[Path::new("/dev/null")],
        )?;
        Ok((cmd, ruleset))
    }
}

fn link_shared(app_dir: &Path, host_path: &Path, name: &str) -> Result<(), ExecError> {
    if name.is_empty() || name.contains('/') || name == "." || name == ".." {
        return Err(ExecError::StartFailed(format!("invalid shared file name {name:?}")));
    }
    let link = app_dir.join(name);
    match fs::symlink_metadata(&link) {
        Ok(meta) if meta.file_type().is_symlink() => fs::remove_file(&link)?,
        Ok(_) => {
            return Err(ExecError::StartFailed(format!(
                "{} already exists in app_dir",
                name
            )))
        }
        Err(_) => {}
    }
    symlink(host_path, &link)?;
    Ok(())
}

/// Maps a cpu share to a nice level: 100% runs at 0, shares near zero at 19.
pub(crate) fn nice_for_share(pct: f64) -> i32 {
    let pct = if pct.is_nan() { 100.0 } else { pct.clamp(0.0, 100.0) };
    (19.0 * (1.0 - pct / 100.0)).round() as i32
}

impl Executor for SandboxExecutor {
    fn backend(&self) -> &'static str {
        "sandbox"
    }

    fn build(&self, recipe: &str, manifest: &str) -> Result<ImageRef, ExecError> {
        let hash = domain_content_hash(recipe.as_bytes(), manifest.as_bytes());
        if let Some(image) = self.load_image(&hash) {
            return Ok(image);
        }
        let gate = self
            .building
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(hash.clone())
            .or_default()
            .clone();
        let _held = gate.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(image) = self.load_image(&hash) {
            return Ok(image);
        }
        self.build_fresh(&hash, recipe, manifest)
    }

    fn guest_dirs(&self, mounts: &Mounts) -> GuestDirs {
        GuestDirs {
            app_dir: mounts.app_dir.to_string_lossy().into_owned(),
            checkpoint_dir: mounts.checkpoint_dir.to_string_lossy().into_owned(),
            output_dir: mounts.output_dir.to_string_lossy().into_owned(),
        }
    }

    fn start(&self, spec: &ExecSpec) -> Result<ExecHandle, ExecError> {
        let (mut cmd, ruleset) = self.command_for(spec)?;
        let nice = nice_for_share(spec.limits.cpu_share_pct);
        let mem_bytes = spec.limits.memory_mb.saturating_mul(1024 * 1024);
        let ruleset_fd = ruleset.as_ref().map(|r| r.raw_fd());
        // SAFETY: the closure only issues async-signal-safe syscalls.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setsid() < 0 {
                    return Err(io::Error::last_os_error());
                }
                if nice > 0 {
                    libc::setpriority(libc::PRIO_PROCESS, 0, nice);
                }
                if mem_bytes > 0 {
                    let lim = libc::rlimit {
                        rlim_cur: mem_bytes,
                        rlim_max: mem_bytes,
                    };
                    if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                }
                if let Some(fd) = ruleset_fd {
                    restrict_self(fd)?;
                }
                Ok(())
            });
        }
        let id = self.procs.next_id();
        let confined = ruleset.is_some();
        let result = self.procs.spawn(id, cmd, confined, None);
        drop(ruleset);
        result.map_err(|e| {
            if let Ok(mut console) = OpenOptions::new().append(true).open(spec.console_path()) {
                let _ = writeln!(console, "gridforge: failed to start {:?}: {e}", spec.entry_command);
            }
            ExecError::StartFailed(e.to_string())
        })
    }

    fn status(&self, id: &HandleId) -> Result<ExecHandle, ExecError> {
        self.procs
            .status(id)
            .ok_or_else(|| ExecError::UnknownHandle(id.clone()))
    }

    fn kill(&self, id: &HandleId) -> Result<ExecState, ExecError> {
        self.procs
            .kill(id)
            .ok_or_else(|| ExecError::UnknownHandle(id.clone()))
    }

    fn shutdown(&self) {
        self.procs.kill_all();
    }
}
