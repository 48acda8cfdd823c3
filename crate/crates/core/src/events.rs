//! Observable events emitted by the manager and the agents.
//!
//! Production deployments drop them (or log them); the simulation harness
//! collects them into a totally ordered trace and asserts over it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ids::{ClientId, FileId, RequestId, RoomId, RunId, UserId};
use crate::model::Availability;
use crate::status::{RequestStatus, RunStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    ManagerStarted,
    ManagerStopped,
    ClientRegistered {
        client_id: ClientId,
        agent_id: String,
        has_gpu: bool,
        slots: u32,
    },
    ClientRoomAssigned {
        client_id: ClientId,
        room_id: RoomId,
    },
    ClientAvailability {
        client_id: ClientId,
        availability: Availability,
    },
    RestartAttempted {
        client_id: ClientId,
    },
    HeartbeatReceived {
        client_id: ClientId,
        accepting_new: bool,
    },
    /// Emitted by the agent when its status tick decides availability.
    AgentHeartbeat {
        client_id: Option<ClientId>,
        accepting_new: bool,
        cpu_pct: f64,
        interactive: bool,
    },
    RequestSubmitted {
        request_id: RequestId,
        user: UserId,
        repetitions: u32,
        parallel: bool,
        needs_gpu: bool,
        same_machine: bool,
        rooms: Vec<RoomId>,
    },
    RequestStatusChanged {
        request_id: RequestId,
        status: RequestStatus,
    },
    RunCreated {
        run_id: RunId,
        request_id: RequestId,
        rank: u32,
        attempt: u32,
    },
    DispatchSent {
        run_id: RunId,
        request_id: RequestId,
        rank: u32,
        client_id: ClientId,
    },
    DispatchAcked {
        run_id: RunId,
        request_id: RequestId,
        rank: u32,
        client_id: ClientId,
        rendezvous_port: Option<u16>,
    },
    DispatchRefused {
        run_id: RunId,
        request_id: RequestId,
        rank: u32,
        client_id: ClientId,
        reason: String,
    },
    AgentAccepted {
        client_id: Option<ClientId>,
        run_id: RunId,
        request_id: RequestId,
        rank: u32,
    },
    AgentRefused {
        client_id: Option<ClientId>,
        run_id: RunId,
        reason: String,
    },
    RunTransition {
        run_id: RunId,
        request_id: RequestId,
        rank: u32,
        client_id: Option<ClientId>,
        attempt: u32,
        from: RunStatus,
        to: RunStatus,
        obs: String,
    },
    BarrierReleased {
        request_id: RequestId,
        master_addr: String,
        master_port: u16,
    },
    BuildStarted {
        client_id: Option<ClientId>,
        content_hash: String,
    },
    BuildFinished {
        client_id: Option<ClientId>,
        content_hash: String,
        ok: bool,
    },
    FileTransfer {
        client_id: ClientId,
        file_id: FileId,
        bytes: u64,
    },
    ExecLaunched {
        client_id: Option<ClientId>,
        run_id: RunId,
        rank: u32,
        cpu_share_pct: f64,
        memory_mb: u64,
        restart: u32,
        master_addr: String,
        master_port: u16,
    },
    ExecExited {
        client_id: Option<ClientId>,
        run_id: RunId,
        exit_code: Option<i32>,
        killed: bool,
    },
    CancellationDelivered {
        client_id: ClientId,
        run_id: RunId,
    },
    StaleResult {
        client_id: ClientId,
        run_id: RunId,
    },
    Progress {
        run_id: RunId,
        message: String,
        percent: Option<f64>,
    },
    Fault {
        description: String,
    },
}

impl TraceEvent {
    /// Periodic chatter that happens whether or not any work is queued.
    pub fn is_background(&self) -> bool {
        matches!(
            self,
            TraceEvent::HeartbeatReceived { .. } | TraceEvent::AgentHeartbeat { .. }
        )
    }
}

pub trait EventSink: Send + Sync {
    fn emit(&self, source: &str, event: TraceEvent);
}

/// Discards every event.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopSink;

impl EventSink for NoopSink {
    fn emit(&self, _source: &str, _event: TraceEvent) {}
}

pub type SharedSink = Arc<dyn EventSink>;

pub fn noop_sink() -> SharedSink {
    Arc::new(NoopSink)
}
