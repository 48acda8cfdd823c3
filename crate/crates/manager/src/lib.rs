//! The gridforge manager: registries, per-user queues, the scheduler, the
//! liveness and supervision monitors, and the REST surface used by users,
//! administrators and client agents.

pub mod auth;
pub mod config;
pub mod error;
pub mod placement;
pub mod seed;
pub mod state;
pub use gridforge_core::store;
pub mod api;
pub mod service;

pub use auth::Principal;
pub use config::ManagerConfig;
pub use error::{ManagerError, Result};
pub use service::{serve, ClientHooks, Manager, ManagerHandle, NoHooks};
pub use state::State;
pub use store::{FileStore, MemoryStore, Store};
