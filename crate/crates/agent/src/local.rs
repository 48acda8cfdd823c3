//! What the agent remembers across its own restarts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gridforge_core::time::Timestamp;
use gridforge_core::wire::{DispatchEnvelope, RunOutcome};
use gridforge_core::{ClientId, RunId, RunStatus};
use gridforge_executor::{ExecSpec, HandleId};
use serde::{Deserialize, Serialize};

/// Outcome waiting to be delivered; the bundle lives in the blob store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingResult {
    pub outcome: RunOutcome,
    pub exit_code: Option<i32>,
    pub obs: String,
    pub has_bundle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRun {
    pub envelope: DispatchEnvelope,
    pub status: RunStatus,
    pub dir: PathBuf,
    pub rendezvous_port: Option<u16>,
    /// Set once launched; relaunches reuse it unchanged.
    pub spec: Option<ExecSpec>,
    pub handle: Option<HandleId>,
    pub restarts: u32,
    pub exit_code: Option<i32>,
    pub cancel_requested: bool,
    pub result: Option<PendingResult>,
    pub delivered: bool,
    pub accepted_at: Timestamp,
}

impl LocalRun {
    /// Holds a slot: accepted and not yet finished executing.
    pub fn occupies_slot(&self) -> bool {
        !self.status.is_terminal()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LocalState {
    pub client_id: Option<ClientId>,
    pub runs: BTreeMap<RunId, LocalRun>,
}

impl LocalState {
    pub fn active(&self) -> usize {
        self.runs.values().filter(|r| r.occupies_slot()).count()
    }
}
