//! Execution backends for user code.
//!
//! An [`Executor`] turns a build recipe plus dependency manifest into a
//! reusable image, starts detached instances from an [`ExecSpec`], and lets
//! the caller poll or kill them. Two backends ship:
//!
//! * [`SandboxExecutor`] realizes an image as a prepared directory and runs
//!   user code as a confined subprocess. It needs nothing beyond a Linux
//!   kernel and is what tests and the simulation harness use.
//! * [`ContainerExecutor`] drives a Docker-compatible CLI.

mod container;
mod landlock;
mod procs;
mod recipe;
mod sandbox;
mod spec;

use thiserror::Error;

pub use container::ContainerExecutor;
pub use landlock::landlock_abi;
pub use recipe::{parse_recipe, Recipe};
pub use sandbox::SandboxExecutor;
pub use spec::{
    ExecHandle, ExecSpec, ExecState, GuestDirs, HandleId, ImageRef, Mounts, ResourceLimits,
    SharedMount,
};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("image build failed:\n{log}")]
    BuildFailed { log: String },
    #[error("failed to start: {0}")]
    StartFailed(String),
    #[error("unknown execution handle {0}")]
    UnknownHandle(HandleId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A backend able to build images and run detached instances.
///
/// Implementations are safe for concurrent use across handles; calls on the
/// same handle are serialized internally. `build` and `kill` may block.
pub trait Executor: Send + Sync {
    fn backend(&self) -> &'static str;

    /// Builds (or reuses) the image for these inputs. Content-addressed:
    /// equal inputs give an equal [`ImageRef`].
    fn build(&self, recipe: &str, manifest: &str) -> Result<ImageRef, ExecError>;

    /// Directory paths as the user code will see them.
    fn guest_dirs(&self, mounts: &Mounts) -> GuestDirs;

    /// Starts the instance and returns without waiting for it.
    fn start(&self, spec: &ExecSpec) -> Result<ExecHandle, ExecError>;

    fn status(&self, id: &HandleId) -> Result<ExecHandle, ExecError>;

    /// Terminates the instance's process tree: soft signal, grace period,
    /// then hard kill. No-op on terminal handles.
    fn kill(&self, id: &HandleId) -> Result<ExecState, ExecError>;

    /// Kills every live instance.
    fn shutdown(&self);
}
