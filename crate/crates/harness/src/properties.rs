//! Named invariants evaluated over a [`Trace`].
//!
//! Each check is a pure function of the trace and reports the first record
//! that breaks it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use gridforge_core::events::TraceEvent;
use gridforge_core::{run_status_transition, ClientId, RequestId, RequestStatus, RoomId, RunEvent, RunId, RunStatus, UserId};
use thiserror::Error;

use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    /// Every run transition is an edge of the run state machine and
    /// continues from the run's previous state.
    StateMachineClosure,
    /// At most one Success per `(request, rank)`, and exactly one for every
    /// rank of a Completed request.
    RankUniqueness,
    /// No rank of a parallel request starts before its barrier is released,
    /// and every launch gets the released rendezvous address.
    BarrierSafety,
    /// Each client downloads each shared file at most once.
    TransferEconomy,
    /// A user's requests get their first placement in submission order.
    FifoPerUser,
    /// Placements honor the GPU flag, the request's rooms and the client's
    /// slot count.
    FilterCompliance,
    /// An agent accepts nothing while its last heartbeat refused new work.
    ThrottleCompliance,
}

impl Property {
    pub const ALL: [Property; 7] = [
        Property::StateMachineClosure,
        Property::RankUniqueness,
        Property::BarrierSafety,
        Property::TransferEconomy,
        Property::FifoPerUser,
        Property::FilterCompliance,
        Property::ThrottleCompliance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::StateMachineClosure => "state_machine_closure",
            Property::RankUniqueness => "rank_uniqueness",
            Property::BarrierSafety => "barrier_safety",
            Property::TransferEconomy => "transfer_economy",
            Property::FifoPerUser => "fifo_per_user",
            Property::FilterCompliance => "filter_compliance",
            Property::ThrottleCompliance => "throttle_compliance",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = PropertyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Property::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PropertyError::UnknownProperty(s.to_string()))
    }
}

/// The first record that breaks a property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub property: Property,
    /// `None` when the violation is about something missing at the end.
    pub seq: Option<u64>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(seq) => write!(f, "{} violated at event {seq}: {}", self.property, self.message),
            None => write!(f, "{} violated: {}", self.property, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PropertyError {
    #[error("unknown property {0:?}")]
    UnknownProperty(String),
    #[error("{0}")]
    Violated(Violation),
}

/// Evaluates the named property.
pub fn assert_trace(trace: &Trace, property: &str) -> Result<(), PropertyError> {
    check(trace, property.parse()?).map_err(PropertyError::Violated)
}

pub fn check(trace: &Trace, property: Property) -> Result<(), Violation> {
    let fail = |seq: Option<u64>, message: String| Violation {
        property,
        seq,
        message,
    };
    match property {
        Property::StateMachineClosure => state_machine_closure(trace).map_err(|(s, m)| fail(Some(s), m)),
        Property::RankUniqueness => rank_uniqueness(trace).map_err(|(s, m)| fail(s, m)),
        Property::BarrierSafety => barrier_safety(trace).map_err(|(s, m)| fail(Some(s), m)),
        Property::TransferEconomy => transfer_economy(trace).map_err(|(s, m)| fail(Some(s), m)),
        Property::FifoPerUser => fifo_per_user(trace).map_err(|(s, m)| fail(Some(s), m)),
        Property::FilterCompliance => filter_compliance(trace).map_err(|(s, m)| fail(Some(s), m)),
        Property::ThrottleCompliance => throttle_compliance(trace).map_err(|(s, m)| fail(Some(s), m)),
    }
}

/// Every property that fails.
pub fn check_all(trace: &Trace) -> Vec<Violation> {
    Property::ALL.into_iter().filter_map(|p| check(trace, p).err()).collect()
}

type Check = Result<(), (u64, String)>;

fn state_machine_closure(trace: &Trace) -> Check {
    let mut state: HashMap<RunId, RunStatus> = HashMap::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::RunCreated { run_id, .. } => {
                if state.insert(*run_id, RunStatus::Pending).is_some() {
                    return Err((r.seq, format!("run {run_id} created twice")));
                }
            }
            TraceEvent::RunTransition { run_id, from, to, .. } => {
                // Runs created before the trace window start from whatever
                // the first transition says.
                let current = *state.get(run_id).unwrap_or(from);
                if current != *from {
                    return Err((r.seq, format!("run {run_id} moved from {from} while in {current}")));
                }
                let legal = RunEvent::ALL
                    .into_iter()
                    .any(|e| run_status_transition(*from, e) == Ok(*to));
                if !legal {
                    return Err((r.seq, format!("run {run_id}: no event leads from {from} to {to}")));
                }
                state.insert(*run_id, *to);
            }
            _ => {}
        }
    }
    Ok(())
}

fn rank_uniqueness(trace: &Trace) -> Result<(), (Option<u64>, String)> {
    let mut reps: HashMap<RequestId, u32> = HashMap::new();
    let mut wins: HashMap<(RequestId, u32), u32> = HashMap::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::RequestSubmitted {
                request_id,
                repetitions,
                ..
            } => {
                reps.insert(*request_id, *repetitions);
            }
            TraceEvent::RunTransition {
                request_id,
                rank,
                to: RunStatus::Success,
                ..
            } => {
                let n = wins.entry((*request_id, *rank)).or_default();
                *n += 1;
                if *n > 1 {
                    return Err((Some(r.seq), format!("request {request_id} rank {rank} succeeded twice")));
                }
            }
            TraceEvent::RequestStatusChanged {
                request_id,
                status: RequestStatus::Completed,
            } => {
                if let Some(&n) = reps.get(request_id) {
                    if let Some(rank) = (0..n).find(|k| !wins.contains_key(&(*request_id, *k))) {
                        return Err((
                            Some(r.seq),
                            format!("request {request_id} completed without a success for rank {rank}"),
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn barrier_safety(trace: &Trace) -> Check {
    let mut parallel: BTreeSet<RequestId> = BTreeSet::new();
    let mut released: HashMap<RequestId, (String, u16)> = HashMap::new();
    let mut request_of: HashMap<RunId, RequestId> = HashMap::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::RequestSubmitted {
                request_id,
                parallel: true,
                ..
            } => {
                parallel.insert(*request_id);
            }
            TraceEvent::RunCreated {
                run_id, request_id, ..
            } => {
                request_of.insert(*run_id, *request_id);
            }
            TraceEvent::BarrierReleased {
                request_id,
                master_addr,
                master_port,
            } => {
                released.insert(*request_id, (master_addr.clone(), *master_port));
            }
            TraceEvent::RunTransition {
                request_id,
                rank,
                to: RunStatus::Running,
                ..
            } if parallel.contains(request_id) && !released.contains_key(request_id) => {
                return Err((r.seq, format!("request {request_id} rank {rank} started before release")));
            }
            TraceEvent::ExecLaunched {
                run_id,
                rank,
                master_addr,
                master_port,
                ..
            } => {
                let Some(req) = request_of.get(run_id).filter(|q| parallel.contains(q)) else {
                    continue;
                };
                match released.get(req) {
                    None => return Err((r.seq, format!("request {req} rank {rank} launched before release"))),
                    Some((addr, port)) if addr != master_addr || port != master_port => {
                        return Err((
                            r.seq,
                            format!("rank {rank} launched with {master_addr}:{master_port}, released {addr}:{port}"),
                        ))
                    }
                    Some(_) => {}
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn transfer_economy(trace: &Trace) -> Check {
    let mut seen = BTreeSet::new();
    for r in trace.iter() {
        if let TraceEvent::FileTransfer { client_id, file_id, .. } = &r.event {
            if !seen.insert((*client_id, *file_id)) {
                return Err((r.seq, format!("file {file_id} sent to client {client_id} again")));
            }
        }
    }
    Ok(())
}

fn fifo_per_user(trace: &Trace) -> Check {
    let mut order: BTreeMap<UserId, Vec<RequestId>> = BTreeMap::new();
    let mut owner: HashMap<RequestId, UserId> = HashMap::new();
    let mut placed: BTreeSet<RequestId> = BTreeSet::new();
    let mut ended: BTreeSet<RequestId> = BTreeSet::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::RequestSubmitted { request_id, user, .. } => {
                order.entry(user.clone()).or_default().push(*request_id);
                owner.insert(*request_id, user.clone());
            }
            TraceEvent::RequestStatusChanged { request_id, status } if status.is_terminal() => {
                ended.insert(*request_id);
            }
            TraceEvent::DispatchSent { request_id, .. } => {
                if !placed.insert(*request_id) {
                    continue;
                }
                let Some(user) = owner.get(request_id) else {
                    continue;
                };
                let earlier = order[user].iter().take_while(|q| *q != request_id);
                for q in earlier {
                    if !placed.contains(q) && !ended.contains(q) {
                        return Err((r.seq, format!("request {request_id} of {user} placed before earlier {q}")));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Default)]
struct ClientFacts {
    has_gpu: bool,
    slots: u32,
    room: Option<RoomId>,
}

fn filter_compliance(trace: &Trace) -> Check {
    let mut clients: HashMap<ClientId, ClientFacts> = HashMap::new();
    let mut requests: HashMap<RequestId, (bool, BTreeSet<RoomId>)> = HashMap::new();
    let mut runs: HashMap<RunId, (ClientId, RunStatus)> = HashMap::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::ClientRegistered {
                client_id,
                has_gpu,
                slots,
                ..
            } => {
                let c = clients.entry(*client_id).or_default();
                c.has_gpu = *has_gpu;
                c.slots = *slots;
            }
            TraceEvent::ClientRoomAssigned { client_id, room_id } => {
                clients.entry(*client_id).or_default().room = Some(*room_id);
            }
            TraceEvent::RequestSubmitted {
                request_id,
                needs_gpu,
                rooms,
                ..
            } => {
                requests.insert(*request_id, (*needs_gpu, rooms.iter().copied().collect()));
            }
            TraceEvent::DispatchSent {
                request_id,
                client_id,
                rank,
                ..
            } => {
                let (Some(c), Some((gpu, rooms))) = (clients.get(client_id), requests.get(request_id)) else {
                    continue;
                };
                if *gpu && !c.has_gpu {
                    return Err((r.seq, format!("GPU rank {rank} of {request_id} sent to client {client_id}")));
                }
                if !c.room.is_some_and(|room| rooms.contains(&room)) {
                    return Err((r.seq, format!("rank {rank} of {request_id} sent outside its rooms to {client_id}")));
                }
            }
            TraceEvent::RunTransition {
                run_id,
                client_id: Some(client),
                to,
                ..
            } => {
                runs.insert(*run_id, (*client, *to));
                let busy = runs.values().filter(|(c, s)| c == client && s.is_active()).count() as u32;
                let slots = clients.get(client).map(|c| c.slots).unwrap_or(u32::MAX);
                if busy > slots {
                    return Err((r.seq, format!("client {client} holds {busy} runs with {slots} slots")));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn throttle_compliance(trace: &Trace) -> Check {
    let mut accepting: HashMap<&str, bool> = HashMap::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::AgentHeartbeat { accepting_new, .. } => {
                accepting.insert(r.source.as_str(), *accepting_new);
            }
            TraceEvent::AgentAccepted { run_id, .. } if accepting.get(r.source.as_str()) == Some(&false) => {
                return Err((r.seq, format!("{} accepted run {run_id} while refusing new work", r.source)));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Launches on `source` after its first interactive heartbeat following
/// `from_seq`, with the limits they got.
pub fn launches_after_login<'a>(trace: &'a Trace, source: &str, from_seq: u64) -> Vec<(&'a TraceRecord, f64, u64)> {
    let mut interactive = false;
    let mut out = Vec::new();
    for r in trace.iter().filter(|r| r.seq >= from_seq && r.source == source) {
        match &r.event {
            TraceEvent::AgentHeartbeat { interactive: i, .. } => interactive = *i,
            TraceEvent::ExecLaunched {
                cpu_share_pct,
                memory_mb,
                restart: 0,
                ..
            } if interactive => out.push((r, *cpu_share_pct, *memory_mb)),
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Collector;
    use gridforge_core::events::EventSink;

    fn transition(req: u64, run: u64, rank: u32, from: RunStatus, to: RunStatus) -> TraceEvent {
        TraceEvent::RunTransition {
            run_id: RunId(run),
            request_id: RequestId(req),
            rank,
            client_id: Some(ClientId(1)),
            attempt: 1,
            from,
            to,
            obs: String::new(),
        }
    }

    fn submitted(req: u64, user: &str, reps: u32, parallel: bool) -> TraceEvent {
        TraceEvent::RequestSubmitted {
            request_id: RequestId(req),
            user: UserId::new(user),
            repetitions: reps,
            parallel,
            needs_gpu: false,
            same_machine: false,
            rooms: vec![RoomId(1)],
        }
    }

    fn happy_run(c: &Collector, req: u64, run: u64, rank: u32) {
        use RunStatus::*;
        c.emit("manager", TraceEvent::RunCreated { run_id: RunId(run), request_id: RequestId(req), rank, attempt: 1 });
        for (a, b) in [(Pending, Distributed), (Distributed, Running), (Running, Success)] {
            c.emit("manager", transition(req, run, rank, a, b));
        }
    }

    #[test]
    fn unknown_property_is_an_error() {
        assert_eq!(
            assert_trace(&Trace::default(), "no_such_thing"),
            Err(PropertyError::UnknownProperty("no_such_thing".into()))
        );
        for p in Property::ALL {
            assert_eq!(p.name().parse::<Property>().unwrap(), p);
            assert!(assert_trace(&Trace::default(), p.name()).is_ok());
        }
    }

    #[test]
    fn doctored_double_success_is_caught_at_its_event() {
        let c = Collector::new();
        c.emit("manager", submitted(1, "alice", 1, false));
        happy_run(&c, 1, 1, 0);
        assert!(check_all(&c.snapshot()).is_empty());
        let seq = c.next_seq() + 3;
        happy_run(&c, 1, 2, 0);
        let err = assert_trace(&c.snapshot(), "rank_uniqueness").unwrap_err();
        match err {
            PropertyError::Violated(v) => assert_eq!(v.seq, Some(seq)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn completion_without_every_rank_fails() {
        let c = Collector::new();
        c.emit("manager", submitted(1, "alice", 2, false));
        happy_run(&c, 1, 1, 0);
        c.emit("manager", TraceEvent::RequestStatusChanged { request_id: RequestId(1), status: RequestStatus::Completed });
        assert!(check(&c.snapshot(), Property::RankUniqueness).is_err());
    }

    #[test]
    fn illegal_edges_break_closure() {
        let c = Collector::new();
        c.emit("manager", TraceEvent::RunCreated { run_id: RunId(1), request_id: RequestId(1), rank: 0, attempt: 1 });
        c.emit("manager", transition(1, 1, 0, RunStatus::Pending, RunStatus::Running));
        let v = check(&c.snapshot(), Property::StateMachineClosure).unwrap_err();
        assert_eq!(v.seq, Some(1));
    }

    #[test]
    fn start_before_release_breaks_barrier_safety() {
        let c = Collector::new();
        c.emit("manager", submitted(1, "alice", 2, true));
        c.emit("manager", TraceEvent::RunCreated { run_id: RunId(1), request_id: RequestId(1), rank: 0, attempt: 1 });
        c.emit("manager", transition(1, 1, 0, RunStatus::Pending, RunStatus::Distributed));
        c.emit("manager", transition(1, 1, 0, RunStatus::Distributed, RunStatus::Running));
        assert!(check(&c.snapshot(), Property::BarrierSafety).is_err());
    }

    #[test]
    fn out_of_order_placement_breaks_fifo() {
        let c = Collector::new();
        c.emit("manager", submitted(1, "alice", 1, false));
        c.emit("manager", submitted(2, "alice", 1, false));
        c.emit("manager", submitted(3, "bob", 1, false));
        let sent = |req: u64| TraceEvent::DispatchSent { run_id: RunId(req), request_id: RequestId(req), rank: 0, client_id: ClientId(1) };
        c.emit("manager", sent(3));
        assert!(check(&c.snapshot(), Property::FifoPerUser).is_ok());
        c.emit("manager", sent(2));
        assert_eq!(check(&c.snapshot(), Property::FifoPerUser).unwrap_err().seq, Some(4));
    }

    #[test]
    fn acceptance_while_refusing_is_caught() {
        let c = Collector::new();
        let hb = |ok| TraceEvent::AgentHeartbeat { client_id: Some(ClientId(1)), accepting_new: ok, cpu_pct: 0.0, interactive: false };
        let acc = TraceEvent::AgentAccepted { client_id: Some(ClientId(1)), run_id: RunId(1), request_id: RequestId(1), rank: 0 };
        c.emit("agent:a", hb(false));
        c.emit("agent:b", acc.clone());
        assert!(check(&c.snapshot(), Property::ThrottleCompliance).is_ok());
        c.emit("agent:a", acc);
        assert!(check(&c.snapshot(), Property::ThrottleCompliance).is_err());
    }

    #[test]
    fn gpu_and_slot_filters() {
        let c = Collector::new();
        c.emit("manager", TraceEvent::ClientRegistered { client_id: ClientId(1), agent_id: "a".into(), has_gpu: false, slots: 1 });
        c.emit("manager", TraceEvent::ClientRoomAssigned { client_id: ClientId(1), room_id: RoomId(1) });
        c.emit("manager", submitted(1, "alice", 2, false));
        happy_run(&c, 1, 1, 0);
        assert!(check(&c.snapshot(), Property::FilterCompliance).is_ok());
        c.emit("manager", transition(1, 2, 1, RunStatus::Pending, RunStatus::Distributed));
        c.emit("manager", transition(1, 3, 1, RunStatus::Pending, RunStatus::Distributed));
        assert!(check(&c.snapshot(), Property::FilterCompliance).is_err());

        let c = Collector::new();
        c.emit("manager", TraceEvent::ClientRegistered { client_id: ClientId(1), agent_id: "a".into(), has_gpu: false, slots: 1 });
        c.emit("manager", TraceEvent::ClientRoomAssigned { client_id: ClientId(1), room_id: RoomId(1) });
        c.emit("manager", TraceEvent::RequestSubmitted {
            request_id: RequestId(1),
            user: UserId::new("alice"),
            repetitions: 1,
            parallel: false,
            needs_gpu: true,
            same_machine: false,
            rooms: vec![RoomId(1)],
        });
        c.emit("manager", TraceEvent::DispatchSent { run_id: RunId(1), request_id: RequestId(1), rank: 0, client_id: ClientId(1) });
        assert!(check(&c.snapshot(), Property::FilterCompliance).is_err());
    }
}
