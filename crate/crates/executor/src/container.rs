use std::fs::{self, OpenOptions};
use std::io;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use gridforge_core::hash::domain_content_hash;

use crate::procs::ProcessTable;
use crate::recipe::parse_recipe;
use crate::spec::{ExecHandle, ExecSpec, ExecState, GuestDirs, HandleId, ImageRef, Mounts};
use crate::{ExecError, Executor};

const GUEST_APP: &str = "/gridforge/app";
const GUEST_CHECKPOINT: &str = "/gridforge/checkpoint";
const GUEST_OUTPUT: &str = "/gridforge/output";

/// Drives a Docker-compatible CLI (`docker`, `podman`).
///
/// Images are tagged `gridforge-domain:<hash prefix>`. The manifest is copied
/// into the build context and run with `sh` as the last build step. Runs
/// use `docker run --rm` in the foreground of a supervised child, so the
/// console capture and process bookkeeping match the sandbox backend.
pub struct ContainerExecutor {
    cli: String,
    work: PathBuf,
    procs: ProcessTable,
    build_lock: Mutex<()>,
    kill_grace: Duration,
}

impl ContainerExecutor {
    pub fn new(cli: impl Into<String>, work: impl Into<PathBuf>, kill_grace: Duration) -> io::Result<Self> {
        let work = work.into();
        fs::create_dir_all(&work)?;
        Ok(ContainerExecutor {
            cli: cli.into(),
            work,
            procs: ProcessTable::new("ctr", kill_grace),
            build_lock: Mutex::new(()),
            kill_grace,
        })
    }

    fn tag_for(hash: &str) -> String {
        format!("gridforge-domain:{}", &hash[..hash.len().min(16)])
    }

    fn image_exists(&self, tag: &str) -> bool {
        Command::new(&self.cli)
            .args(["image", "inspect", tag])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }
}

/// Dockerfile used for a domain: the recipe followed by the manifest step.
pub(crate) fn dockerfile(recipe: &str) -> String {
    let mut text = recipe.trim_end().to_string();
    text.push_str("\nCOPY manifest.sh /tmp/gridforge-manifest.sh\n");
    text.push_str("RUN sh /tmp/gridforge-manifest.sh\n");
    text
}

pub(crate) fn container_name(id: &HandleId) -> String {
    format!("gf-{}", id.0)
}

/// Arguments after the CLI binary for starting `spec` as container `name`.
pub(crate) fn run_args(spec: &ExecSpec, name: &str) -> Vec<String> {
    let m = &spec.mounts;
    let mut args: Vec<String> = vec![
        "run".into(),
        "--rm".into(),
        "--init".into(),
        "--name".into(),
        name.into(),
        "--workdir".into(),
        GUEST_APP.into(),
    ];
    let cpus = spec.limits.cpu_share_pct.clamp(1.0, 100.0) / 100.0
        * std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) as f64;
    args.push(format!("--cpus={cpus:.2}"));
    if spec.limits.memory_mb > 0 {
        args.push(format!("--memory={}m", spec.limits.memory_mb));
    }
    if spec.limits.gpu {
        args.extend(["--gpus".into(), "all".into()]);
    }
    for (host, guest) in [
        (&m.app_dir, GUEST_APP),
        (&m.checkpoint_dir, GUEST_CHECKPOINT),
        (&m.output_dir, GUEST_OUTPUT),
    ] {
        args.push("--volume".into());
        args.push(format!("{}:{guest}:rw", host.display()));
    }
    for shared in &m.shared {
        args.push("--volume".into());
        args.push(format!("{}:{GUEST_APP}/{}:ro", shared.host_path.display(), shared.name));
    }
    if let Some(port) = spec.rendezvous_port {
        args.push("--publish".into());
        args.push(format!("{port}:{port}"));
    }
    for (k, v) in &spec.env {
        args.push("--env".into());
        args.push(format!("{k}={v}"));
    }
    args.push(spec.image.location.clone());
    args.extend(spec.command_line());
    args
}

impl Executor for ContainerExecutor {
    fn backend(&self) -> &'static str {
        "container"
    }

    fn build(&self, recipe: &str, manifest: &str) -> Result<ImageRef, ExecError> {
        let parsed = parse_recipe(recipe)?;
        let hash = domain_content_hash(recipe.as_bytes(), manifest.as_bytes());
        let tag = Self::tag_for(&hash);
        let image = ImageRef {
            backend: "container".into(),
            content_hash: hash.clone(),
            location: tag.clone(),
            base: parsed.base,
            env: parsed.env,
        };
        let _held = self.build_lock.lock().unwrap_or_else(|e| e.into_inner());
        if self.image_exists(&tag) {
            return Ok(image);
        }
        let ctx = self.work.join(format!("build-{hash}"));
        let _ = fs::remove_dir_all(&ctx);
        fs::create_dir_all(&ctx)?;
        fs::write(ctx.join("Dockerfile"), dockerfile(recipe))?;
        fs::write(ctx.join("manifest.sh"), manifest)?;
        let out = Command::new(&self.cli)
            .args(["build", "--tag", &tag])
            .arg(&ctx)
            .stdin(Stdio::null())
            .output()
            .map_err(|e| ExecError::BuildFailed {
                log: format!("cannot run {}: {e}", self.cli),
            })?;
        let _ = fs::remove_dir_all(&ctx);
        if !out.status.success() {
            return Err(ExecError::BuildFailed {
                log: format!(
                    "{}{}",
                    String::from_utf8_lossy(&out.stdout),
                    String::from_utf8_lossy(&out.stderr)
                ),
            });
        }
        Ok(image)
    }

    fn guest_dirs(&self, _mounts: &Mounts) -> GuestDirs {
        GuestDirs {
            app_dir: GUEST_APP.into(),
            checkpoint_dir: GUEST_CHECKPOINT.into(),
            output_dir: GUEST_OUTPUT.into(),
        }
    }

    fn start(&self, spec: &ExecSpec) -> Result<ExecHandle, ExecError> {
        let m = &spec.mounts;
        for dir in [&m.app_dir, &m.checkpoint_dir, &m.output_dir] {
            if !dir.is_dir() {
                return Err(ExecError::StartFailed(format!("{} does not exist", dir.display())));
            }
        }
        let console = OpenOptions::new()
            .create(true)
            .append(true)
            .open(spec.console_path())?;
        let id = self.procs.next_id();
        let name = container_name(&id);
        let mut cmd = Command::new(&self.cli);
        cmd.args(run_args(spec, &name))
            .stdin(Stdio::null())
            .stdout(console.try_clone()?)
            .stderr(console);
        // SAFETY: setsid is async-signal-safe.
        unsafe {
            cmd.pre_exec(|| {
                if libc::setsid() < 0 {
                    return Err(io::Error::last_os_error());
                }
                Ok(())
            });
        }
        let cli = self.cli.clone();
        let grace = self.kill_grace.as_secs().max(1).to_string();
        let stop = Arc::new(move || {
            let _ = Command::new(&cli)
                .args(["stop", "--time", &grace, &name])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn();
        });
        self.procs
            .spawn(id, cmd, true, Some(Box::new(move || stop())))
            .map_err(|e| ExecError::StartFailed(e.to_string()))
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
