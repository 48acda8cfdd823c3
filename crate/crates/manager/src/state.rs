//! The manager's canonical state and every transition on it.
//!
//! All mutation happens through `&mut State` while the caller holds the
//! manager lock, so run transitions are linearizable. Network calls are made
//! by the caller between `plan_*` and `apply_*` steps, never in here.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use gridforge_core::aggregate::aggregate_outputs;
use gridforge_core::archive::{list_files, pack_entries};
use gridforge_core::events::{SharedSink, TraceEvent};
use gridforge_core::hash::sha256_hex;
use gridforge_core::time::{now_ms, Timestamp};
use gridforge_core::wire::{
    AgentRunView, BarrierReply, ClientView, CreateDomain, CreateProcess, CreateRoom,
    DispatchEnvelope, DispatchReply, DomainRef, DomainSpec, Heartbeat, ProcessRef, RefuseReason,
    RegisterClient, RequestView, ResultReport, RunOutcome, RunTable, SharedFileRef, StatusReport,
};
use gridforge_core::{
    entry_file_of, run_status_transition, validate_request, Availability, Catalog, ClientId,
    ClientNode, Domain, DomainId, DomainOrigin, FileId, IllegalTransition, OutputBundle,
    PayloadKind, ProcessDef, ProcessId, ProcessRun, Progress, RankedBundle, Request, RequestForm,
    RequestId, RequestStatus, ResourceSnapshot, Room, RoomId, RunEvent, RunId, RunStatus,
    SharedFile, UserId, Visibility,
};
use serde::{Deserialize, Serialize};

use crate::auth::{Principal, ADMIN_USER};
use crate::error::{ManagerError, Result};
use crate::placement::select_clients;
use crate::seed::store_domains;
use crate::store::Store;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Counters {
    client: u64,
    request: u64,
    run: u64,
    room: u64,
    domain: u64,
    process: u64,
    file: u64,
}

fn bump(c: &mut u64) -> u64 {
    *c += 1;
    *c
}

/// Rank-0 coordinates of a parallel request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendezvousEntry {
    pub request_id: RequestId,
    pub master_addr: String,
    pub master_port: u16,
    pub set: bool,
}

/// Everything that survives a manager restart.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Registry {
    pub counters: Counters,
    pub clients: BTreeMap<ClientId, ClientNode>,
    pub missed_pings: BTreeMap<ClientId, u32>,
    pub rooms: BTreeMap<RoomId, Room>,
    pub domains: BTreeMap<DomainId, Domain>,
    pub processes: BTreeMap<ProcessId, ProcessDef>,
    pub files: BTreeMap<FileId, SharedFile>,
    pub requests: BTreeMap<RequestId, Request>,
    pub runs: BTreeMap<RunId, ProcessRun>,
    pub request_runs: BTreeMap<RequestId, Vec<RunId>>,
    pub queues: BTreeMap<UserId, VecDeque<RequestId>>,
    pub rr_last: Option<UserId>,
    pub rendezvous: BTreeMap<RequestId, RendezvousEntry>,
    pub barrier_released: BTreeMap<RequestId, Timestamp>,
    pub cancellations: BTreeMap<ClientId, BTreeSet<RunId>>,
    pub transfers: BTreeSet<(ClientId, FileId)>,
    pub archives: BTreeSet<RequestId>,
}

/// One dispatch chosen by a scheduling pass, to be sent outside the lock.
#[derive(Debug, Clone)]
pub struct PlannedDispatch {
    pub run_id: RunId,
    pub client_id: ClientId,
    pub address: String,
    pub envelope: DispatchEnvelope,
}

pub struct State {
    pub reg: Registry,
    /// Runs with a dispatch on the wire, and where it went.
    inflight: BTreeMap<RunId, ClientId>,
    store: Arc<dyn Store>,
    sink: SharedSink,
    retry_cap: u32,
    missed_threshold: u32,
}

pub const PUBLIC_ROOM: &str = "Public";

fn payload_key(p: ProcessId) -> String {
    format!("payload/{p}.tar.gz")
}
fn file_key(f: FileId) -> String {
    format!("file/{f}.bin")
}
fn bundle_key(r: RunId) -> String {
    format!("bundle/{r}")
}
fn archive_key(r: RequestId) -> String {
    format!("archive/{r}.tar.gz")
}

fn admin() -> UserId {
    UserId::new(ADMIN_USER)
}

fn acting_user(p: &Principal) -> Result<&UserId> {
    p.user()
        .ok_or_else(|| ManagerError::Forbidden("agents cannot perform user actions".into()))
}

fn lookup<'a, K: Ord + Copy + std::str::FromStr, V>(
    map: &'a BTreeMap<K, V>,
    key: &str,
    name_of: impl Fn(&V) -> &str,
    visible: impl Fn(&V) -> bool,
) -> Option<(K, &'a V)> {
    if let Ok(id) = key.parse::<K>() {
        if let Some(v) = map.get(&id).filter(|v| visible(v)) {
            return Some((id, v));
        }
    }
    map.iter()
        .find(|(_, v)| name_of(v) == key && visible(v))
        .map(|(k, v)| (*k, v))
}

/// Name and id resolution as seen by one user.
struct UserCatalog<'a> {
    reg: &'a Registry,
    user: &'a UserId,
    is_admin: bool,
}

impl UserCatalog<'_> {
    fn domain(&self, key: &str) -> Option<&Domain> {
        lookup(&self.reg.domains, key, |d| &d.name, |d| d.visible_to(self.user, self.is_admin)).map(|(_, d)| d)
    }
}

impl Catalog for UserCatalog<'_> {
    fn resolve_domain(&self, key: &str) -> Option<DomainId> {
        self.domain(key).map(|d| d.domain_id)
    }

    fn resolve_process(&self, key: &str) -> Option<ProcessId> {
        lookup(&self.reg.processes, key, |p| &p.name, |p| self.is_admin || &p.owner_user == self.user)
            .map(|(id, _)| id)
    }

    fn resolve_shared_file(&self, key: &str) -> Option<FileId> {
        lookup(&self.reg.files, key, |f| &f.name, |f| self.is_admin || &f.owner_user == self.user)
            .map(|(id, _)| id)
    }

    fn resolve_room(&self, key: &str) -> Option<RoomId> {
        lookup(&self.reg.rooms, key, |r| &r.name, |r| self.is_admin || r.accessible_to(self.user))
            .map(|(id, _)| id)
    }

    fn max_client_slots(&self, rooms: &BTreeSet<RoomId>) -> Option<u32> {
        self.reg
            .clients
            .values()
            .filter(|c| c.rooms.iter().any(|r| rooms.contains(r)))
            .map(|c| c.config.max_concurrent_runs)
            .max()
    }
}

impl State {
    /// Loads the snapshot from `store`, or seeds a fresh registry with the
    /// Public room and the store domains.
    pub fn open(
        store: Arc<dyn Store>,
        sink: SharedSink,
        retry_cap: u32,
        missed_threshold: u32,
    ) -> Result<Self> {
        let reg = match store.load_state()? {
            Some(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| ManagerError::Internal(format!("corrupt state snapshot: {e}")))?,
            None => Registry::default(),
        };
        let fresh = reg.counters.room == 0 && reg.rooms.is_empty();
        let mut state = State {
            reg,
            inflight: BTreeMap::new(),
            store,
            sink,
            retry_cap,
            missed_threshold,
        };
        if fresh {
            state.seed()?;
        }
        state.recompute_loads();
        state.persist()?;
        Ok(state)
    }

    fn seed(&mut self) -> Result<()> {
        let admin = Principal::Admin(admin());
        self.create_room(
            &admin,
            CreateRoom {
                name: PUBLIC_ROOM.into(),
                visibility: Visibility::Public,
                members: vec![],
            },
        )?;
        for d in store_domains() {
            self.create_domain(&admin, d)?;
        }
        Ok(())
    }

    pub fn persist(&self) -> Result<()> {
        let bytes = serde_json::to_vec(&self.reg).map_err(|e| ManagerError::Internal(e.to_string()))?;
        self.store.save_state(&bytes)?;
        Ok(())
    }

    fn emit(&self, event: TraceEvent) {
        self.sink.emit("manager", event);
    }

    // ----- clients and rooms -------------------------------------------------

    pub fn register_client(&mut self, ann: RegisterClient) -> Result<ClientId> {
        ann.config.validate().map_err(ManagerError::Invalid)?;
        if ann.address.is_empty() || ann.agent_id.is_empty() {
            return Err(ManagerError::Invalid("address and agent_id are required".into()));
        }
        let existing = self
            .reg
            .clients
            .values()
            .find(|c| c.agent_id == ann.agent_id)
            .map(|c| c.client_id);
        let id = match existing {
            Some(id) => {
                let c = self.reg.clients.get_mut(&id).expect("client present");
                c.address = ann.address;
                c.has_gpu = ann.has_gpu;
                c.cores = ann.cores;
                c.ram_mb = ann.ram_mb;
                c.config = ann.config;
                let revived = c.availability == Availability::Unreachable;
                if revived {
                    c.availability = Availability::Available;
                }
                self.reg.missed_pings.insert(id, 0);
                if revived {
                    self.emit(TraceEvent::ClientAvailability {
                        client_id: id,
                        availability: Availability::Available,
                    });
                }
                id
            }
            None => {
                let id = ClientId(bump(&mut self.reg.counters.client));
                let slots = ann.config.max_concurrent_runs;
                self.reg.clients.insert(
                    id,
                    ClientNode {
                        client_id: id,
                        agent_id: ann.agent_id.clone(),
                        address: ann.address,
                        rooms: BTreeSet::new(),
                        has_gpu: ann.has_gpu,
                        cores: ann.cores,
                        ram_mb: ann.ram_mb,
                        snapshot: ResourceSnapshot::default(),
                        availability: Availability::Available,
                        config: ann.config,
                        active_run_count: 0,
                        accepting_new: true,
                    },
                );
                self.emit(TraceEvent::ClientRegistered {
                    client_id: id,
                    agent_id: ann.agent_id,
                    has_gpu: ann.has_gpu,
                    slots,
                });
                id
            }
        };
        self.recompute_loads();
        Ok(id)
    }

    /// Records a heartbeat. Returns false for unknown clients.
    pub fn heartbeat(&mut self, id: ClientId, hb: Heartbeat) -> bool {
        let Some(c) = self.reg.clients.get_mut(&id) else {
            return false;
        };
        c.snapshot = hb.snapshot.clamped();
        c.accepting_new = hb.accepting_new;
        let before = c.availability;
        if before != Availability::Disabled {
            c.availability = if hb.accepting_new {
                Availability::Available
            } else {
                Availability::Busy
            };
        }
        let after = c.availability;
        self.reg.missed_pings.insert(id, 0);
        self.emit(TraceEvent::HeartbeatReceived {
            client_id: id,
            accepting_new: hb.accepting_new,
        });
        if before != after {
            self.emit(TraceEvent::ClientAvailability {
                client_id: id,
                availability: after,
            });
        }
        true
    }

    pub fn create_room(&mut self, p: &Principal, body: CreateRoom) -> Result<RoomId> {
        let owner = acting_user(p)?.clone();
        let name = body.name.trim();
        if name.is_empty() {
            return Err(ManagerError::Invalid("room name is required".into()));
        }
        if self.reg.rooms.values().any(|r| r.name == name) {
            return Err(ManagerError::Conflict(format!("room {name:?} already exists")));
        }
        let id = RoomId(bump(&mut self.reg.counters.room));
        self.reg.rooms.insert(
            id,
            Room {
                room_id: id,
                name: name.to_string(),
                owner_user: owner,
                visibility: body.visibility,
                member_users: body.members.into_iter().collect(),
                client_ids: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn rooms_for(&self, p: &Principal) -> Result<Vec<Room>> {
        let user = acting_user(p)?;
        Ok(self
            .reg
            .rooms
            .values()
            .filter(|r| p.is_admin() || r.accessible_to(user))
            .cloned()
            .collect())
    }

    /// Moves a client into `room_id`. Administrators may move any client;
    /// other users only between rooms they own.
    pub fn assign_client_to_room(&mut self, p: &Principal, client_id: ClientId, room_id: RoomId) -> Result<Room> {
        let user = acting_user(p)?.clone();
        let dest = self
            .reg
            .rooms
            .get(&room_id)
            .ok_or_else(|| ManagerError::NotFound(format!("room {room_id}")))?;
        let client = self
            .reg
            .clients
            .get(&client_id)
            .ok_or_else(|| ManagerError::NotFound(format!("client {client_id}")))?;
        if !p.is_admin() {
            let owns_dest = dest.owner_user == user;
            let owns_sources = !client.rooms.is_empty()
                && client
                    .rooms
                    .iter()
                    .all(|r| self.reg.rooms.get(r).is_some_and(|r| r.owner_user == user));
            if !(owns_dest && owns_sources) {
                return Err(ManagerError::Forbidden(format!(
                    "{user} must own both the source and destination rooms of client {client_id}"
                )));
            }
        }
        let old: Vec<RoomId> = client.rooms.iter().copied().collect();
        for r in old {
            if let Some(room) = self.reg.rooms.get_mut(&r) {
                room.client_ids.remove(&client_id);
            }
        }
        if let Some(c) = self.reg.clients.get_mut(&client_id) {
            c.rooms = BTreeSet::from([room_id]);
        }
        let room = self.reg.rooms.get_mut(&room_id).expect("room checked above");
        room.client_ids.insert(client_id);
        let room = room.clone();
        self.emit(TraceEvent::ClientRoomAssigned { client_id, room_id });
        Ok(room)
    }

    pub fn client_views(&self, p: &Principal) -> Result<Vec<ClientView>> {
        let user = acting_user(p)?;
        let visible_rooms: BTreeSet<RoomId> = self
            .reg
            .rooms
            .values()
            .filter(|r| p.is_admin() || r.accessible_to(user))
            .map(|r| r.room_id)
            .collect();
        Ok(self
            .reg
            .clients
            .values()
            .filter(|c| p.is_admin() || c.rooms.iter().any(|r| visible_rooms.contains(r)))
            .map(|c| ClientView {
                client_id: c.client_id,
                name: c.agent_id.clone(),
                address: c.address.clone(),
                room: c
                    .rooms
                    .iter()
                    .next()
                    .and_then(|r| self.reg.rooms.get(r))
                    .map(|r| r.name.clone()),
                availability: c.availability,
                accepting_new: c.accepting_new,
                has_gpu: c.has_gpu,
                slots: c.config.max_concurrent_runs,
                active_runs: c.active_run_count,
                snapshot: c.snapshot.clone(),
            })
            .collect())
    }

    // ----- catalog ------------------------------------------------------------

    pub fn create_domain(&mut self, p: &Principal, body: CreateDomain) -> Result<DomainId> {
        let owner = acting_user(p)?.clone();
        if body.name.trim().is_empty() || body.build_recipe.trim().is_empty() {
            return Err(ManagerError::Invalid("name and build_recipe are required".into()));
        }
        if !body.entry_template.contains("{entry}") {
            return Err(ManagerError::Invalid("entry_template must contain {entry}".into()));
        }
        let approved = match body.origin {
            DomainOrigin::Store => p.is_admin(),
            DomainOrigin::User => true,
        };
        let id = DomainId(bump(&mut self.reg.counters.domain));
        let domain = Domain::new(
            id,
            body.name.trim(),
            owner,
            body.build_recipe,
            body.dependency_manifest,
            body.entry_template,
            body.origin,
            approved,
        );
        self.reg.domains.insert(id, domain);
        Ok(id)
    }

    pub fn domains_for(&self, p: &Principal, store_only: bool) -> Result<Vec<Domain>> {
        let user = acting_user(p)?;
        Ok(self
            .reg
            .domains
            .values()
            .filter(|d| d.visible_to(user, p.is_admin()))
            .filter(|d| !store_only || d.origin == DomainOrigin::Store)
            .cloned()
            .collect())
    }

    pub fn approve_domain(&mut self, p: &Principal, id: DomainId) -> Result<Domain> {
        if !p.is_admin() {
            return Err(ManagerError::Forbidden("only administrators approve store domains".into()));
        }
        let d = self
            .reg
            .domains
            .get_mut(&id)
            .ok_or_else(|| ManagerError::NotFound(format!("domain {id}")))?;
        d.approved = true;
        Ok(d.clone())
    }

    pub fn domain_spec(&self, id: DomainId) -> Result<DomainSpec> {
        let d = self
            .reg
            .domains
            .get(&id)
            .ok_or_else(|| ManagerError::NotFound(format!("domain {id}")))?;
        Ok(DomainSpec {
            domain_id: id,
            build_recipe: d.build_recipe.clone(),
            dependency_manifest: d.dependency_manifest.clone(),
            content_hash: d.content_hash.clone(),
        })
    }

    pub fn create_process(&mut self, p: &Principal, body: CreateProcess) -> Result<ProcessId> {
        let user = acting_user(p)?.clone();
        if body.name.trim().is_empty() {
            return Err(ManagerError::Invalid("process name is required".into()));
        }
        if body.payload.is_empty() {
            return Err(ManagerError::Invalid("payload is empty".into()));
        }
        let (files, archive) = match body.payload_kind {
            PayloadKind::SingleFile => {
                let name = body
                    .file_name
                    .clone()
                    .filter(|n| !n.is_empty() && !n.contains('/') && n != "." && n != "..")
                    .ok_or_else(|| ManagerError::Invalid("single-file payloads need a plain file_name".into()))?;
                let archive = pack_entries(&[(name.as_str(), body.payload.as_slice())])?;
                (vec![name], archive)
            }
            PayloadKind::Archive => {
                let files = list_files(&body.payload)
                    .map_err(|e| ManagerError::Invalid(format!("payload is not a tar.gz archive: {e}")))?;
                (files, body.payload.clone())
            }
        };
        let entry_command = match body.entry_command.filter(|c| !c.trim().is_empty()) {
            Some(cmd) => cmd,
            None => {
                let catalog = UserCatalog {
                    reg: &self.reg,
                    user: &user,
                    is_admin: p.is_admin(),
                };
                let key = body
                    .domain
                    .as_deref()
                    .ok_or_else(|| ManagerError::Invalid("give entry_command or a domain".into()))?;
                let domain = catalog
                    .domain(key)
                    .ok_or_else(|| ManagerError::Invalid(format!("unknown domain {key:?}")))?;
                let entry = body
                    .entry_file
                    .clone()
                    .or(body.file_name.clone())
                    .ok_or_else(|| ManagerError::Invalid("entry_file is required".into()))?;
                let quoted = shell_quote(&entry);
                domain.entry_template.replace("{entry}", &quoted)
            }
        };
        entry_file_of(&entry_command, &files).map_err(ManagerError::Invalid)?;
        let id = ProcessId(bump(&mut self.reg.counters.process));
        self.store.put_blob(&payload_key(id), &archive)?;
        self.reg.processes.insert(
            id,
            ProcessDef {
                process_id: id,
                name: body.name.trim().to_string(),
                owner_user: user,
                payload_kind: body.payload_kind,
                payload_files: files,
                payload_hash: sha256_hex(&archive),
                entry_command,
            },
        );
        Ok(id)
    }

    pub fn processes_for(&self, p: &Principal) -> Result<Vec<ProcessDef>> {
        let user = acting_user(p)?;
        Ok(self
            .reg
            .processes
            .values()
            .filter(|d| p.is_admin() || &d.owner_user == user)
            .cloned()
            .collect())
    }

    pub fn payload(&self, id: ProcessId) -> Result<Vec<u8>> {
        if !self.reg.processes.contains_key(&id) {
            return Err(ManagerError::NotFound(format!("process {id}")));
        }
        self.store
            .get_blob(&payload_key(id))?
            .ok_or_else(|| ManagerError::Internal(format!("payload of process {id} missing")))
    }

    pub fn upload_file(&mut self, p: &Principal, name: &str, bytes: &[u8]) -> Result<FileId> {
        let owner = acting_user(p)?.clone();
        let name = name.trim();
        if name.is_empty() || name.contains('/') || name == "." || name == ".." {
            return Err(ManagerError::Invalid("shared files need a plain name".into()));
        }
        if self.reg.files.values().any(|f| f.name == name) {
            return Err(ManagerError::Conflict(format!("shared file {name:?} already exists")));
        }
        let id = FileId(bump(&mut self.reg.counters.file));
        self.store.put_blob(&file_key(id), bytes)?;
        self.reg.files.insert(
            id,
            SharedFile {
                file_id: id,
                name: name.to_string(),
                size_bytes: bytes.len() as u64,
                content_hash: sha256_hex(bytes),
                owner_user: owner,
            },
        );
        Ok(id)
    }

    pub fn files_for(&self, p: &Principal) -> Result<Vec<SharedFile>> {
        let user = acting_user(p)?;
        Ok(self
            .reg
            .files
            .values()
            .filter(|f| p.is_admin() || &f.owner_user == user)
            .cloned()
            .collect())
    }

    /// Streams a shared file to a client that holds a run needing it.
    pub fn serve_shared_file(&mut self, client: ClientId, file: FileId) -> Result<Vec<u8>> {
        if !self.reg.files.contains_key(&file) {
            return Err(ManagerError::NotFound(format!("file {file}")));
        }
        let entitled = self.reg.runs.values().any(|r| {
            r.client_id == Some(client)
                && !r.status.is_terminal()
                && self
                    .reg
                    .requests
                    .get(&r.request_id)
                    .is_some_and(|q| q.spec.shared_file_ids.contains(&file))
        });
        if !entitled {
            return Err(ManagerError::Forbidden(format!(
                "client {client} has no run referencing file {file}"
            )));
        }
        let bytes = self
            .store
            .get_blob(&file_key(file))?
            .ok_or_else(|| ManagerError::Internal(format!("content of file {file} missing")))?;
        self.reg.transfers.insert((client, file));
        self.emit(TraceEvent::FileTransfer {
            client_id: client,
            file_id: file,
            bytes: bytes.len() as u64,
        });
        Ok(bytes)
    }

    // ----- requests -------------------------------------------------------------

    pub fn submit_request(&mut self, p: &Principal, form: &RequestForm) -> Result<RequestId> {
        let user = acting_user(p)?.clone();
        let catalog = UserCatalog {
            reg: &self.reg,
            user: &user,
            is_admin: p.is_admin(),
        };
        let spec = validate_request(form, &catalog)?;
        let id = RequestId(bump(&mut self.reg.counters.request));
        let reps = spec.repetitions;
        self.emit(TraceEvent::RequestSubmitted {
            request_id: id,
            user: user.clone(),
            repetitions: reps,
            parallel: spec.parallel,
            needs_gpu: spec.needs_gpu,
            same_machine: spec.same_machine,
            rooms: spec.room_ids.iter().copied().collect(),
        });
        self.reg.requests.insert(
            id,
            Request {
                request_id: id,
                user: user.clone(),
                spec,
                status: RequestStatus::Queued,
                created_at: now_ms(),
                finished_at: None,
            },
        );
        for rank in 0..reps {
            self.new_run(id, rank, 1);
        }
        self.reg.queues.entry(user).or_default().push_back(id);
        Ok(id)
    }

    fn new_run(&mut self, request_id: RequestId, rank: u32, attempt: u32) -> RunId {
        let run_id = RunId(bump(&mut self.reg.counters.run));
        self.reg
            .runs
            .insert(run_id, ProcessRun::pending(run_id, request_id, rank, attempt));
        self.reg.request_runs.entry(request_id).or_default().push(run_id);
        self.emit(TraceEvent::RunCreated {
            run_id,
            request_id,
            rank,
            attempt,
        });
        run_id
    }

    fn runs_of(&self, request_id: RequestId) -> impl Iterator<Item = &ProcessRun> {
        self.reg
            .request_runs
            .get(&request_id)
            .into_iter()
            .flatten()
            .filter_map(|id| self.reg.runs.get(id))
    }

    fn owned_request(&self, p: &Principal, id: RequestId) -> Result<&Request> {
        let req = self
            .reg
            .requests
            .get(&id)
            .ok_or_else(|| ManagerError::NotFound(format!("request {id}")))?;
        let user = acting_user(p)?;
        if !p.is_admin() && &req.user != user {
            return Err(ManagerError::Forbidden(format!("request {id} belongs to another user")));
        }
        Ok(req)
    }

    fn succeeded_ranks(&self, id: RequestId) -> BTreeSet<u32> {
        self.runs_of(id)
            .filter(|r| r.status == RunStatus::Success)
            .map(|r| r.rank)
            .collect()
    }

    fn view_of(&self, req: &Request) -> RequestView {
        let succeeded = self.succeeded_ranks(req.request_id).len() as u32;
        RequestView {
            request: req.clone(),
            succeeded,
            progress: f64::from(succeeded) / f64::from(req.spec.repetitions.max(1)),
            archive_ready: self.reg.archives.contains(&req.request_id),
        }
    }

    pub fn request_view(&self, p: &Principal, id: RequestId) -> Result<RequestView> {
        Ok(self.view_of(self.owned_request(p, id)?))
    }

    pub fn request_views(&self, p: &Principal) -> Result<Vec<RequestView>> {
        let user = acting_user(p)?;
        Ok(self
            .reg
            .requests
            .values()
            .filter(|r| p.is_admin() || &r.user == user)
            .map(|r| self.view_of(r))
            .collect())
    }

    pub fn run_table(&self, p: &Principal, id: RequestId) -> Result<RunTable> {
        self.owned_request(p, id)?;
        let mut runs: Vec<ProcessRun> = self.runs_of(id).cloned().collect();
        runs.sort_by_key(|r| r.run_id);
        Ok(RunTable { request_id: id, runs })
    }

    pub fn cancel_request(&mut self, p: &Principal, id: RequestId) -> Result<RequestView> {
        let req = self.owned_request(p, id)?;
        if req.status.is_terminal() {
            return Err(ManagerError::AlreadyTerminal(id));
        }
        self.end_request(id, RequestStatus::Canceled, "Canceled");
        self.recompute_loads();
        self.request_view(p, id)
    }

    /// Moves a request to a terminal status and cancels its live runs.
    fn end_request(&mut self, id: RequestId, status: RequestStatus, obs: &str) {
        let live: Vec<RunId> = self
            .runs_of(id)
            .filter(|r| !r.status.is_terminal())
            .map(|r| r.run_id)
            .collect();
        for run_id in live {
            let client = self.reg.runs[&run_id].client_id;
            if self.transition(run_id, RunEvent::CancelRequested, Some(obs)).is_ok() {
                if let Some(c) = client {
                    self.queue_cancellation(c, run_id);
                }
            }
        }
        self.set_request_status(id, status);
    }

    fn set_request_status(&mut self, id: RequestId, status: RequestStatus) {
        let Some(req) = self.reg.requests.get_mut(&id) else {
            return;
        };
        if req.status == status {
            return;
        }
        req.status = status;
        let user = req.user.clone();
        if status.is_terminal() {
            req.finished_at = Some(now_ms());
            self.dequeue(&user, id);
        }
        self.emit(TraceEvent::RequestStatusChanged { request_id: id, status });
    }

    fn dequeue(&mut self, user: &UserId, id: RequestId) {
        if let Some(q) = self.reg.queues.get_mut(user) {
            q.retain(|r| *r != id);
            if q.is_empty() {
                self.reg.queues.remove(user);
            }
        }
    }

    fn queue_cancellation(&mut self, client: ClientId, run: RunId) {
        self.reg.cancellations.entry(client).or_default().insert(run);
    }

    pub fn pending_cancellations(&self, client: ClientId) -> Vec<RunId> {
        self.reg
            .cancellations
            .get(&client)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn ack_cancellations(&mut self, client: ClientId, runs: &[RunId]) {
        let mut delivered = Vec::new();
        if let Some(set) = self.reg.cancellations.get_mut(&client) {
            for r in runs {
                if set.remove(r) {
                    delivered.push(*r);
                }
            }
            if set.is_empty() {
                self.reg.cancellations.remove(&client);
            }
        }
        for run_id in delivered {
            self.emit(TraceEvent::CancellationDelivered {
                client_id: client,
                run_id,
            });
        }
    }

    // ----- run transitions ---------------------------------------------------

    fn transition(
        &mut self,
        run_id: RunId,
        event: RunEvent,
        obs: Option<&str>,
    ) -> std::result::Result<RunStatus, IllegalTransition> {
        let run = self.reg.runs.get_mut(&run_id).expect("transition on a known run");
        let from = run.status;
        let to = run_status_transition(from, event)?;
        run.status = to;
        if let Some(o) = obs {
            run.obs = o.to_string();
        }
        let now = now_ms();
        if to == RunStatus::Running {
            run.started_at = Some(now);
        }
        if to.is_terminal() {
            run.finished_at = Some(now);
        }
        let ev = TraceEvent::RunTransition {
            run_id,
            request_id: run.request_id,
            rank: run.rank,
            client_id: run.client_id,
            attempt: run.attempt,
            from,
            to,
            obs: run.obs.clone(),
        };
        self.emit(ev);
        Ok(to)
    }

    /// Cancels a run that can no longer be supervised and schedules a fresh
    /// attempt of its rank.
    fn reassign(&mut self, run_id: RunId, event: RunEvent, obs: &str) {
        let run = &self.reg.runs[&run_id];
        let (request_id, rank, client) = (run.request_id, run.rank, run.client_id);
        if self.transition(run_id, event, Some(obs)).is_err() {
            return;
        }
        if let Some(c) = client {
            self.queue_cancellation(c, run_id);
        }
        if self
            .reg
            .requests
            .get(&request_id)
            .is_some_and(|r| !r.status.is_terminal())
        {
            self.new_attempt(request_id, rank);
        }
    }

    fn new_attempt(&mut self, request_id: RequestId, rank: u32) -> RunId {
        let attempt = self
            .runs_of(request_id)
            .filter(|r| r.rank == rank)
            .map(|r| r.attempt)
            .max()
            .unwrap_or(0)
            + 1;
        self.new_run(request_id, rank, attempt)
    }

    fn check_attribution(&self, client: ClientId, run_id: RunId) -> Result<&ProcessRun> {
        let run = self
            .reg
            .runs
            .get(&run_id)
            .ok_or_else(|| ManagerError::NotFound(format!("run {run_id}")))?;
        if run.client_id != Some(client) {
            // The agent can report before its dispatch reply is applied.
            if self.inflight.get(&run_id) == Some(&client) {
                return Err(ManagerError::Unavailable(format!("dispatch of run {run_id} is still being recorded")));
            }
            return Err(ManagerError::StaleAttempt(run_id));
        }
        Ok(run)
    }

    /// Applies an intermediate status report from the run's client.
    pub fn report_status(&mut self, client: ClientId, run_id: RunId, report: StatusReport) -> Result<ProcessRun> {
        let run = self.check_attribution(client, run_id)?;
        if run.status.is_terminal() {
            return Err(ManagerError::StaleAttempt(run_id));
        }
        let request_id = run.request_id;
        let target = match report.event {
            RunEvent::BuildStarted => RunStatus::Building,
            RunEvent::BarrierWait => RunStatus::WaitingBarrier,
            RunEvent::Started => RunStatus::Running,
            other => {
                return Err(ManagerError::Invalid(format!(
                    "{other:?} is reported through the result endpoint"
                )))
            }
        };
        if run.status == target {
            return Ok(run.clone());
        }
        if report.event == RunEvent::Started {
            let parallel = self.reg.requests.get(&request_id).is_some_and(|r| r.spec.parallel);
            if parallel && !self.reg.barrier_released.contains_key(&request_id) {
                return Err(ManagerError::Conflict(format!(
                    "run {run_id} cannot start before the barrier of request {request_id} is released"
                )));
            }
        }
        self.transition(run_id, report.event, report.obs.as_deref())
            .map_err(|e| ManagerError::Conflict(e.to_string()))?;
        if report.event == RunEvent::Started {
            let status = self.reg.requests.get(&request_id).map(|r| r.status);
            if matches!(status, Some(RequestStatus::Queued | RequestStatus::Dispatching)) {
                self.set_request_status(request_id, RequestStatus::Running);
            }
        }
        Ok(self.reg.runs[&run_id].clone())
    }

    pub fn report_progress(&mut self, client: ClientId, run_id: RunId, progress: Progress) -> Result<()> {
        self.check_attribution(client, run_id)?;
        let percent = progress.percent.map(|p| if p.is_nan() { 0.0 } else { p.clamp(0.0, 100.0) });
        let progress = Progress {
            message: progress.message,
            percent,
        };
        if let Some(run) = self.reg.runs.get_mut(&run_id) {
            run.progress = Some(progress.clone());
        }
        self.emit(TraceEvent::Progress {
            run_id,
            message: progress.message,
            percent: progress.percent,
        });
        Ok(())
    }

    /// Records a run's final outcome as reported by its client.
    pub fn record_run_result(&mut self, client: ClientId, run_id: RunId, report: ResultReport) -> Result<ProcessRun> {
        let run = match self.check_attribution(client, run_id) {
            Ok(r) => r,
            Err(e) => {
                if matches!(e, ManagerError::StaleAttempt(_)) {
                    self.emit(TraceEvent::StaleResult { client_id: client, run_id });
                }
                return Err(e);
            }
        };
        if run.status.is_terminal() {
            if run.status == RunStatus::Success && report.outcome == RunOutcome::Succeeded {
                return Ok(run.clone());
            }
            self.emit(TraceEvent::StaleResult { client_id: client, run_id });
            return Err(ManagerError::StaleAttempt(run_id));
        }
        let (request_id, rank) = (run.request_id, run.rank);
        if self.succeeded_ranks(request_id).contains(&rank) {
            self.emit(TraceEvent::StaleResult { client_id: client, run_id });
            let _ = self.transition(run_id, RunEvent::CancelRequested, Some("Canceled"));
            return Err(ManagerError::StaleAttempt(run_id));
        }

        match report.outcome {
            RunOutcome::Succeeded => {
                let bundle = report.bundle.unwrap_or(OutputBundle {
                    run_id,
                    archive: pack_entries::<&str, &[u8]>(&[])?,
                    console_log: Vec::new(),
                });
                self.walk_to_running(run_id);
                let key = bundle_key(run_id);
                self.store.put_blob(&format!("{key}.tar.gz"), &bundle.archive)?;
                self.store.put_blob(&format!("{key}.console"), &bundle.console_log)?;
                if let Some(r) = self.reg.runs.get_mut(&run_id) {
                    r.output_bundle_ref = Some(key);
                }
                let obs = if report.obs.is_empty() { "Success" } else { report.obs.as_str() };
                self.transition(run_id, RunEvent::Succeeded, Some(obs))
                    .map_err(|e| ManagerError::Conflict(e.to_string()))?;
                self.complete_if_done(request_id)?;
            }
            RunOutcome::Failed => {
                let obs = if report.obs.is_empty() {
                    match report.exit_code {
                        Some(c) => format!("Failed: exit code {c}"),
                        None => "Failed".to_string(),
                    }
                } else {
                    report.obs.clone()
                };
                self.transition(run_id, RunEvent::Failed, Some(&obs))
                    .map_err(|e| ManagerError::Conflict(e.to_string()))?;
                let failures = self
                    .runs_of(request_id)
                    .filter(|r| r.rank == rank && r.status == RunStatus::Failed)
                    .count() as u32;
                if failures < self.retry_cap {
                    self.new_attempt(request_id, rank);
                } else {
                    let why = format!("Canceled: rank {rank} failed {failures} times");
                    self.end_request(request_id, RequestStatus::Failed, &why);
                }
            }
            RunOutcome::Canceled => {
                self.reassign(run_id, RunEvent::CancelRequested, "Canceled");
            }
            RunOutcome::Lost => {
                let obs = if report.obs.is_empty() {
                    "Orphaned: lost by client".to_string()
                } else {
                    report.obs.clone()
                };
                self.reassign(run_id, RunEvent::MarkedOrphan, &obs);
            }
        }
        self.recompute_loads();
        Ok(self.reg.runs[&run_id].clone())
    }

    fn walk_to_running(&mut self, run_id: RunId) {
        let status = self.reg.runs[&run_id].status;
        if matches!(
            status,
            RunStatus::Distributed | RunStatus::Building | RunStatus::WaitingBarrier
        ) {
            let _ = self.transition(run_id, RunEvent::Started, None);
        }
    }

    fn complete_if_done(&mut self, request_id: RequestId) -> Result<()> {
        let Some(req) = self.reg.requests.get(&request_id) else {
            return Ok(());
        };
        let reps = req.spec.repetitions;
        let done = self.succeeded_ranks(request_id);
        if (0..reps).any(|r| !done.contains(&r)) {
            return Ok(());
        }
        self.set_request_status(request_id, RequestStatus::Completed);
        match self.build_archive(request_id) {
            Ok(bytes) => {
                self.store.put_blob(&archive_key(request_id), &bytes)?;
                self.reg.archives.insert(request_id);
            }
            Err(e) => tracing::error!(%request_id, "aggregation failed: {e}"),
        }
        Ok(())
    }

    fn build_archive(&self, request_id: RequestId) -> Result<Vec<u8>> {
        let mut bundles = Vec::new();
        for run in self.runs_of(request_id).filter(|r| r.status == RunStatus::Success) {
            bundles.push(RankedBundle {
                rank: run.rank,
                bundle: self.load_bundle(run.run_id)?,
            });
        }
        let archive = aggregate_outputs(&bundles).map_err(|e| ManagerError::Internal(e.to_string()))?;
        Ok(archive.archive)
    }

    fn load_bundle(&self, run_id: RunId) -> Result<OutputBundle> {
        let key = bundle_key(run_id);
        let get = |suffix: &str| -> Result<Vec<u8>> {
            self.store
                .get_blob(&format!("{key}.{suffix}"))?
                .ok_or_else(|| ManagerError::Internal(format!("bundle of run {run_id} missing")))
        };
        Ok(OutputBundle {
            run_id,
            archive: get("tar.gz")?,
            console_log: get("console")?,
        })
    }

    pub fn request_bundle(&self, p: &Principal, id: RequestId, partial: bool) -> Result<Vec<u8>> {
        let req = self.owned_request(p, id)?;
        if self.reg.archives.contains(&id) {
            return self
                .store
                .get_blob(&archive_key(id))?
                .ok_or_else(|| ManagerError::Internal(format!("archive of request {id} missing")));
        }
        if req.status == RequestStatus::Completed {
            return Err(ManagerError::Internal(format!("archive of request {id} was not produced")));
        }
        if !partial {
            return Err(ManagerError::NotReady(format!(
                "request {id} is {:?}; pass partial=true for the ranks finished so far",
                req.status
            )));
        }
        self.build_archive(id)
    }

    pub fn run_bundle(&self, p: &Principal, run_id: RunId) -> Result<Vec<u8>> {
        let run = self
            .reg
            .runs
            .get(&run_id)
            .ok_or_else(|| ManagerError::NotFound(format!("run {run_id}")))?;
        self.owned_request(p, run.request_id)?;
        if run.output_bundle_ref.is_none() {
            return Err(ManagerError::NotReady(format!("run {run_id} has no output yet")));
        }
        Ok(self.load_bundle(run_id)?.archive)
    }

    // ----- barrier --------------------------------------------------------------

    pub fn barrier_poll(&mut self, client: ClientId, run_id: RunId) -> Result<BarrierReply> {
        let run = self.check_attribution(client, run_id)?;
        let request_id = run.request_id;
        let run_terminal = run.status.is_terminal();
        let req = self
            .reg
            .requests
            .get(&request_id)
            .ok_or_else(|| ManagerError::NotFound(format!("request {request_id}")))?;
        if !req.spec.parallel {
            return Err(ManagerError::NotParallel(request_id));
        }
        if req.status.is_terminal() || run_terminal {
            return Ok(BarrierReply::Abort);
        }
        let reps = req.spec.repetitions;
        let Some(rv) = self.reg.rendezvous.get(&request_id).filter(|r| r.set).cloned() else {
            return Ok(BarrierReply::Hold);
        };
        if !self.reg.barrier_released.contains_key(&request_id) {
            let mut latest: BTreeMap<u32, &ProcessRun> = BTreeMap::new();
            for r in self.runs_of(request_id) {
                if latest.get(&r.rank).is_none_or(|l| l.attempt < r.attempt) {
                    latest.insert(r.rank, r);
                }
            }
            let all_placed = (0..reps).all(|rank| {
                latest.get(&rank).is_some_and(|r| {
                    matches!(
                        r.status,
                        RunStatus::Distributed
                            | RunStatus::Building
                            | RunStatus::WaitingBarrier
                            | RunStatus::Running
                            | RunStatus::Success
                    )
                })
            });
            if !all_placed {
                return Ok(BarrierReply::Hold);
            }
            self.reg.barrier_released.insert(request_id, now_ms());
            self.emit(TraceEvent::BarrierReleased {
                request_id,
                master_addr: rv.master_addr.clone(),
                master_port: rv.master_port,
            });
        }
        Ok(BarrierReply::Release {
            master_addr: rv.master_addr,
            master_port: rv.master_port,
        })
    }

    // ----- scheduling -----------------------------------------------------------

    /// Recomputes every client's load from its active runs plus dispatches
    /// still on the wire.
    pub fn recompute_loads(&mut self) {
        let mut load: BTreeMap<ClientId, u32> = BTreeMap::new();
        for r in self.reg.runs.values() {
            if let (Some(c), true) = (r.client_id, r.status.is_active()) {
                *load.entry(c).or_default() += 1;
            }
        }
        for c in self.inflight.values() {
            *load.entry(*c).or_default() += 1;
        }
        for (id, c) in self.reg.clients.iter_mut() {
            c.active_run_count = load.get(id).copied().unwrap_or(0);
        }
    }

    fn envelope(&self, run: &ProcessRun) -> Option<DispatchEnvelope> {
        let req = self.reg.requests.get(&run.request_id)?;
        let domain = self.reg.domains.get(&req.spec.domain_id)?;
        let process = self.reg.processes.get(&req.spec.process_id)?;
        let shared_files = req
            .spec
            .shared_file_ids
            .iter()
            .filter_map(|f| self.reg.files.get(f))
            .map(|f| SharedFileRef {
                file_id: f.file_id,
                name: f.name.clone(),
                content_hash: f.content_hash.clone(),
            })
            .collect();
        Some(DispatchEnvelope {
            run_id: run.run_id,
            request_id: run.request_id,
            user: req.user.clone(),
            rank: run.rank,
            repetitions: req.spec.repetitions,
            attempt: run.attempt,
            parallel: req.spec.parallel,
            needs_gpu: req.spec.needs_gpu,
            parameters: req.spec.parameters.clone(),
            domain: DomainRef {
                domain_id: domain.domain_id,
                content_hash: domain.content_hash.clone(),
            },
            process: ProcessRef {
                process_id: process.process_id,
                payload_hash: process.payload_hash.clone(),
                entry_command: process.entry_command.clone(),
            },
            shared_files,
        })
    }

    /// Client already hosting a live (or in-flight) rank of a same-machine
    /// request; further ranks must follow it there.
    fn pinned_client(&self, request_id: RequestId) -> Option<ClientId> {
        self.runs_of(request_id).find_map(|r| {
            if let Some(c) = self.inflight.get(&r.run_id) {
                return Some(*c);
            }
            r.client_id.filter(|_| !r.status.is_terminal())
        })
    }

    fn reserve(
        &mut self,
        nodes: &mut BTreeMap<ClientId, ClientNode>,
        run_id: RunId,
        client_id: ClientId,
        out: &mut Vec<PlannedDispatch>,
    ) {
        let run = &self.reg.runs[&run_id];
        let Some(envelope) = self.envelope(run) else {
            return;
        };
        let (request_id, rank) = (run.request_id, run.rank);
        let Some(node) = nodes.get_mut(&client_id) else {
            return;
        };
        node.active_run_count += 1;
        let address = node.address.clone();
        self.inflight.insert(run_id, client_id);
        self.emit(TraceEvent::DispatchSent {
            run_id,
            request_id,
            rank,
            client_id,
        });
        out.push(PlannedDispatch {
            run_id,
            client_id,
            address,
            envelope,
        });
    }

    fn pending_ranks(&self, request_id: RequestId) -> Vec<(RunId, u32)> {
        let mut v: Vec<(RunId, u32)> = self
            .runs_of(request_id)
            .filter(|r| r.status == RunStatus::Pending && !self.inflight.contains_key(&r.run_id))
            .map(|r| (r.run_id, r.rank))
            .collect();
        v.sort_by_key(|(id, rank)| (*rank, *id));
        v
    }

    fn place(
        &self,
        request_id: RequestId,
        pending: &[(RunId, u32)],
        nodes: &BTreeMap<ClientId, ClientNode>,
        all: bool,
    ) -> Vec<(RunId, ClientId)> {
        let Some(req) = self.reg.requests.get(&request_id) else {
            return Vec::new();
        };
        let mut spec = req.spec.clone();
        let candidates: Vec<ClientNode> = match (spec.same_machine, self.pinned_client(request_id)) {
            (true, Some(pin)) => {
                spec.same_machine = false;
                nodes.get(&pin).cloned().into_iter().collect()
            }
            _ => nodes.values().cloned().collect(),
        };
        let take = if all || spec.same_machine { pending.len() } else { pending.len().min(1) };
        let ranks: Vec<u32> = pending[..take].iter().map(|(_, r)| *r).collect();
        let plan = select_clients(request_id, &spec, &ranks, &candidates);
        plan.assignments
            .iter()
            .zip(pending)
            .map(|((_, c), (run, _))| (*run, *c))
            .collect()
    }

    /// One pass of the request monitor: retries first, then one rank per
    /// user queue head per round until nothing more fits.
    pub fn plan_tick(&mut self) -> Vec<PlannedDispatch> {
        self.recompute_loads();
        let mut nodes = self.reg.clients.clone();
        let mut out = Vec::new();

        let queued: BTreeSet<RequestId> = self.reg.queues.values().flatten().copied().collect();
        let retry_requests: BTreeSet<RequestId> = self
            .reg
            .runs
            .values()
            .filter(|r| r.status == RunStatus::Pending && !self.inflight.contains_key(&r.run_id))
            .map(|r| r.request_id)
            .filter(|q| !queued.contains(q))
            .filter(|q| self.reg.requests.get(q).is_some_and(|r| !r.status.is_terminal()))
            .collect();
        for request_id in retry_requests {
            let pending = self.pending_ranks(request_id);
            for (run_id, client) in self.place(request_id, &pending, &nodes, true) {
                self.reserve(&mut nodes, run_id, client, &mut out);
            }
        }

        let mut users: Vec<UserId> = self.reg.queues.keys().cloned().collect();
        if let Some(last) = &self.reg.rr_last {
            let split = users.iter().position(|u| u > last).unwrap_or(users.len());
            users.rotate_left(split);
        }
        let mut blocked: BTreeSet<UserId> = BTreeSet::new();
        loop {
            let mut progressed = false;
            for user in &users {
                if blocked.contains(user) {
                    continue;
                }
                let Some(head) = self.reg.queues.get(user).and_then(|q| q.front().copied()) else {
                    blocked.insert(user.clone());
                    continue;
                };
                let pending = self.pending_ranks(head);
                let placed = if pending.is_empty() {
                    Vec::new()
                } else {
                    self.place(head, &pending, &nodes, false)
                };
                if placed.is_empty() {
                    blocked.insert(user.clone());
                    continue;
                }
                for (run_id, client) in placed {
                    self.reserve(&mut nodes, run_id, client, &mut out);
                }
                self.reg.rr_last = Some(user.clone());
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        self.recompute_loads();
        out
    }

    /// Applies the outcome of one dispatch call.
    pub fn apply_dispatch(
        &mut self,
        run_id: RunId,
        client_id: ClientId,
        result: std::result::Result<DispatchReply, String>,
    ) {
        self.inflight.remove(&run_id);
        let Some(run) = self.reg.runs.get(&run_id) else {
            return;
        };
        let (request_id, rank, status) = (run.request_id, run.rank, run.status);
        match result {
            Ok(DispatchReply::Ack { rendezvous_port, .. }) => {
                self.emit(TraceEvent::DispatchAcked {
                    run_id,
                    request_id,
                    rank,
                    client_id,
                    rendezvous_port,
                });
                if status != RunStatus::Pending {
                    // Canceled while the dispatch was on the wire.
                    self.queue_cancellation(client_id, run_id);
                    self.recompute_loads();
                    return;
                }
                if let Some(r) = self.reg.runs.get_mut(&run_id) {
                    r.client_id = Some(client_id);
                    r.dispatched_at = Some(now_ms());
                }
                let _ = self.transition(run_id, RunEvent::Dispatched, Some(""));
                let Some(req) = self.reg.requests.get(&request_id) else {
                    return;
                };
                let (parallel, reps, user, req_status) =
                    (req.spec.parallel, req.spec.repetitions, req.user.clone(), req.status);
                if req_status == RequestStatus::Queued {
                    self.set_request_status(request_id, RequestStatus::Dispatching);
                }
                if parallel && rank == 0 && !self.reg.barrier_released.contains_key(&request_id) {
                    if let (Some(port), Some(c)) = (rendezvous_port, self.reg.clients.get(&client_id)) {
                        self.reg.rendezvous.insert(
                            request_id,
                            RendezvousEntry {
                                request_id,
                                master_addr: c.host().to_string(),
                                master_port: port,
                                set: true,
                            },
                        );
                    }
                }
                let forwarded: BTreeSet<u32> = self
                    .runs_of(request_id)
                    .filter(|r| r.dispatched_at.is_some())
                    .map(|r| r.rank)
                    .collect();
                if (0..reps).all(|r| forwarded.contains(&r)) {
                    self.dequeue(&user, request_id);
                }
            }
            Ok(DispatchReply::Refuse { reason, detail }) => {
                let label = serde_json::to_value(reason)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                if let Some(r) = self.reg.runs.get_mut(&run_id) {
                    r.obs = format!("refused by client {client_id}: {label} {detail}").trim_end().to_string();
                }
                if reason == RefuseReason::Threshold {
                    if let Some(c) = self.reg.clients.get_mut(&client_id) {
                        c.accepting_new = false;
                        if c.availability == Availability::Available {
                            c.availability = Availability::Busy;
                        }
                    }
                }
                self.emit(TraceEvent::DispatchRefused {
                    run_id,
                    request_id,
                    rank,
                    client_id,
                    reason: label,
                });
            }
            Err(e) => {
                if let Some(r) = self.reg.runs.get_mut(&run_id) {
                    r.obs = format!("dispatch to client {client_id} failed: {e}");
                }
                self.emit(TraceEvent::DispatchRefused {
                    run_id,
                    request_id,
                    rank,
                    client_id,
                    reason: "transport".into(),
                });
            }
        }
        self.recompute_loads();
    }

    // ----- monitors ---------------------------------------------------------------

    pub fn ping_targets(&self) -> Vec<(ClientId, String)> {
        self.reg
            .clients
            .values()
            .filter(|c| c.availability != Availability::Disabled)
            .map(|c| (c.client_id, c.address.clone()))
            .collect()
    }

    pub fn ping_succeeded(&mut self, id: ClientId) {
        self.reg.missed_pings.insert(id, 0);
        if let Some(c) = self.reg.clients.get_mut(&id) {
            if c.availability == Availability::Unreachable {
                c.availability = if c.accepting_new {
                    Availability::Available
                } else {
                    Availability::Busy
                };
                let availability = c.availability;
                self.emit(TraceEvent::ClientAvailability {
                    client_id: id,
                    availability,
                });
            }
        }
    }

    /// Counts a missed ping; returns the client for a restart decision.
    pub fn ping_failed(&mut self, id: ClientId) -> Option<ClientNode> {
        let missed = {
            let m = self.reg.missed_pings.entry(id).or_default();
            *m += 1;
            *m
        };
        let c = self.reg.clients.get_mut(&id)?;
        if missed >= self.missed_threshold && c.availability != Availability::Unreachable {
            c.availability = Availability::Unreachable;
            self.emit(TraceEvent::ClientAvailability {
                client_id: id,
                availability: Availability::Unreachable,
            });
        }
        self.reg.clients.get(&id).cloned()
    }

    pub fn note_restart(&self, id: ClientId) {
        self.emit(TraceEvent::RestartAttempted { client_id: id });
    }

    /// Cancels and reschedules every live run on an unreachable client.
    pub fn reassign_unreachable(&mut self) -> Vec<RunId> {
        let doomed: Vec<RunId> = self
            .reg
            .runs
            .values()
            .filter(|r| r.status.is_active())
            .filter(|r| {
                r.client_id.is_some_and(|c| {
                    self.reg
                        .clients
                        .get(&c)
                        .is_none_or(|n| n.availability == Availability::Unreachable)
                })
            })
            .map(|r| r.run_id)
            .collect();
        for id in &doomed {
            self.reassign(*id, RunEvent::CancelRequested, "Canceled");
        }
        if !doomed.is_empty() {
            self.recompute_loads();
        }
        doomed
    }

    /// Clients with live runs to status-poll.
    pub fn supervision_targets(&self) -> Vec<(ClientId, String)> {
        let busy: BTreeSet<ClientId> = self
            .reg
            .runs
            .values()
            .filter(|r| r.status.is_active())
            .filter_map(|r| r.client_id)
            .collect();
        busy.into_iter()
            .filter_map(|c| self.reg.clients.get(&c))
            .filter(|c| matches!(c.availability, Availability::Available | Availability::Busy))
            .map(|c| (c.client_id, c.address.clone()))
            .collect()
    }

    /// Reconciles the manager's view of `client` with the agent's run list,
    /// taken at `polled_at`. Runs the agent does not know are reassigned.
    pub fn reconcile(&mut self, client: ClientId, polled_at: Timestamp, views: &[AgentRunView]) -> Vec<RunId> {
        let by_id: BTreeMap<RunId, &AgentRunView> = views.iter().map(|v| (v.run_id, v)).collect();
        let ours: Vec<(RunId, RunStatus, RequestId, Option<Timestamp>)> = self
            .reg
            .runs
            .values()
            .filter(|r| r.client_id == Some(client) && r.status.is_active())
            .map(|r| (r.run_id, r.status, r.request_id, r.dispatched_at))
            .collect();
        let mut reassigned = Vec::new();
        for (run_id, status, request_id, dispatched_at) in ours {
            match by_id.get(&run_id) {
                None => {
                    if dispatched_at.is_some_and(|t| t < polled_at) {
                        self.reassign(run_id, RunEvent::CancelRequested, "Canceled");
                        reassigned.push(run_id);
                    }
                }
                // Dropped on the agent's side without a result to deliver.
                Some(v) if v.local_status == RunStatus::Canceled => {
                    self.reassign(run_id, RunEvent::CancelRequested, "Canceled");
                    reassigned.push(run_id);
                }
                Some(v) => {
                    let released = self.reg.barrier_released.contains_key(&request_id);
                    let steps: &[RunEvent] = match (status, v.local_status) {
                        (RunStatus::Distributed, RunStatus::Building) => &[RunEvent::BuildStarted],
                        (RunStatus::Distributed | RunStatus::Building, RunStatus::WaitingBarrier) => {
                            &[RunEvent::BarrierWait]
                        }
                        (
                            RunStatus::Distributed | RunStatus::Building | RunStatus::WaitingBarrier,
                            RunStatus::Running,
                        ) => &[RunEvent::Started],
                        _ => &[],
                    };
                    for ev in steps {
                        let parallel = self.reg.requests.get(&request_id).is_some_and(|r| r.spec.parallel);
                        if *ev == RunEvent::Started && parallel && !released {
                            continue;
                        }
                        let _ = self.transition(run_id, *ev, None);
                    }
                }
            }
        }
        if !reassigned.is_empty() {
            self.recompute_loads();
        }
        reassigned
    }

    pub fn run(&self, id: RunId) -> Option<&ProcessRun> {
        self.reg.runs.get(&id)
    }

    pub fn request(&self, id: RequestId) -> Option<&Request> {
        self.reg.requests.get(&id)
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientNode> {
        self.reg.clients.get(&id)
    }

    pub fn inflight_count(&self) -> usize {
        self.inflight.len()
    }
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-/+=:@".contains(c))
    {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}
