//! Client selection for one scheduling pass.

use std::collections::BTreeMap;

use gridforge_core::{Availability, ClientId, ClientNode, RequestId, RequestSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementPlan {
    pub request_id: RequestId,
    pub assignments: Vec<(u32, ClientId)>,
}

impl PlacementPlan {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Whether `client` may receive a run of `spec` at all, ignoring load.
pub fn admissible(client: &ClientNode, spec: &RequestSpec) -> bool {
    client.availability == Availability::Available
        && client.accepting_new
        && (!spec.needs_gpu || client.has_gpu)
        && client.rooms.iter().any(|r| spec.room_ids.contains(r))
}

/// Places `ranks` on `candidates`, where each candidate's
/// `active_run_count` is its current load.
///
/// Each rank goes to the admissible client with the lowest load (ties to
/// the lowest id) that still has a free slot; loads are updated as ranks
/// are placed. With `same_machine`, all ranks go to the least-loaded
/// client that can hold them all, or nothing is placed.
pub fn select_clients(
    request_id: RequestId,
    spec: &RequestSpec,
    ranks: &[u32],
    candidates: &[ClientNode],
) -> PlacementPlan {
    let mut pool: BTreeMap<ClientId, (u32, u32)> = candidates
        .iter()
        .filter(|c| admissible(c, spec))
        .map(|c| (c.client_id, (c.active_run_count, c.spare_slots())))
        .collect();
    let mut assignments = Vec::with_capacity(ranks.len());

    if spec.same_machine {
        let need = ranks.len() as u32;
        let best = pool
            .iter()
            .filter(|(_, (_, spare))| *spare >= need)
            .min_by_key(|(id, (load, _))| (*load, **id))
            .map(|(id, _)| *id);
        if let Some(id) = best {
            assignments.extend(ranks.iter().map(|r| (*r, id)));
        }
    } else {
        for &rank in ranks {
            let best = pool
                .iter()
                .filter(|(_, (_, spare))| *spare > 0)
                .min_by_key(|(id, (load, _))| (*load, **id))
                .map(|(id, _)| *id);
            let Some(id) = best else { break };
            if let Some((load, spare)) = pool.get_mut(&id) {
                *load += 1;
                *spare -= 1;
            }
            assignments.push((rank, id));
        }
    }
    PlacementPlan {
        request_id,
        assignments,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridforge_core::{ClientConfig, DomainId, ProcessId, ResourceSnapshot, RoomId};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn client(id: u64, load: u32, slots: u32) -> ClientNode {
        ClientNode {
            client_id: ClientId(id),
            agent_id: format!("agent-{id}"),
            address: format!("127.0.0.1:{}", 9000 + id),
            rooms: BTreeSet::from([RoomId(1)]),
            has_gpu: false,
            cores: 4,
            ram_mb: 4096,
            snapshot: ResourceSnapshot::default(),
            availability: Availability::Available,
            config: ClientConfig {
                max_concurrent_runs: slots,
                ..ClientConfig::default()
            },
            active_run_count: load,
            accepting_new: true,
        }
    }

    fn spec() -> RequestSpec {
        RequestSpec {
            domain_id: DomainId(1),
            process_id: ProcessId(1),
            repetitions: 3,
            parallel: false,
            parameters: vec![],
            needs_gpu: false,
            same_machine: false,
            shared_file_ids: BTreeSet::new(),
            room_ids: BTreeSet::from([RoomId(1)]),
        }
    }

    fn placed(plan: &PlacementPlan) -> Vec<u64> {
        plan.assignments.iter().map(|(_, c)| c.0).collect()
    }

    #[test]
    fn least_loaded_first_with_id_tiebreak() {
        let cs = [client(1, 0, 4), client(2, 0, 4), client(3, 2, 4)];
        let plan = select_clients(RequestId(1), &spec(), &[0, 1, 2], &cs);
        assert_eq!(placed(&plan), vec![1, 2, 1]);
        assert_eq!(plan.assignments.iter().map(|a| a.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn same_machine_needs_room_for_every_rank() {
        let mut s = spec();
        s.same_machine = true;
        let cs = [client(1, 0, 2), client(2, 1, 2)];
        assert!(select_clients(RequestId(1), &s, &[0, 1, 2], &cs).is_empty());
        let cs = [client(1, 0, 2), client(2, 0, 3), client(3, 1, 5)];
        assert_eq!(placed(&select_clients(RequestId(1), &s, &[0, 1, 2], &cs)), vec![2, 2, 2]);
    }

    #[test]
    fn gpu_filter_leaves_one_client() {
        let mut s = spec();
        s.needs_gpu = true;
        let mut gpu = client(3, 0, 10);
        gpu.has_gpu = true;
        let cs = [client(1, 0, 10), client(2, 0, 10), gpu];
        assert_eq!(placed(&select_clients(RequestId(1), &s, &[0, 1, 2], &cs)), vec![3, 3, 3]);
        assert!(select_clients(RequestId(1), &s, &[0], &cs[..2]).is_empty());
    }

    #[test]
    fn filters_rooms_availability_and_refusal() {
        let mut other_room = client(1, 0, 1);
        other_room.rooms = BTreeSet::from([RoomId(2)]);
        let mut busy = client(2, 0, 1);
        busy.accepting_new = false;
        let mut down = client(3, 0, 1);
        down.availability = Availability::Unreachable;
        let full = client(4, 1, 1);
        let ok = client(5, 0, 1);
        let plan = select_clients(RequestId(1), &spec(), &[0, 1], &[other_room, busy, down, full, ok]);
        assert_eq!(placed(&plan), vec![5]);
    }

    /// Independent oracle: at each step scan every client, keep the ones
    /// with spare capacity, and choose the minimum (load, id).
    fn oracle(clients: &[(u64, u32, u32)], ranks: usize) -> Vec<u64> {
        let mut state: Vec<(u64, u32, u32)> = clients.to_vec();
        let mut out = Vec::new();
        for _ in 0..ranks {
            let mut best: Option<usize> = None;
            for i in 0..state.len() {
                let (id, load, slots) = state[i];
                if load >= slots {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let (bid, bload, _) = state[b];
                        if load < bload || (load == bload && id < bid) {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            match best {
                Some(i) => {
                    state[i].1 += 1;
                    out.push(state[i].0);
                }
                None => break,
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_min_load_oracle(
            raw in proptest::collection::vec((0u32..4, 1u32..5), 1..7),
            ranks in 0usize..20,
        ) {
            let clients: Vec<(u64, u32, u32)> = raw
                .iter()
                .enumerate()
                .map(|(i, (load, slots))| ((i as u64 + 1) * 3 % 17 + 1, (*load).min(*slots), *slots))
                .collect();
            let mut ids: Vec<u64> = clients.iter().map(|c| c.0).collect();
            ids.sort();
            ids.dedup();
            prop_assume!(ids.len() == clients.len());
            let nodes: Vec<ClientNode> = clients.iter().map(|(id, l, s)| client(*id, *l, *s)).collect();
            let rank_list: Vec<u32> = (0..ranks as u32).collect();
            let plan = select_clients(RequestId(1), &spec(), &rank_list, &nodes);
            prop_assert_eq!(placed(&plan), oracle(&clients, ranks));
        }
    }
}
