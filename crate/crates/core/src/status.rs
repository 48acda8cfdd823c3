//! Process-run and request status machines.
//!
//! Run status codes are stored and transported as small integers. Codes 3
//! (success) and 5 (canceled) are fixed by the database layout operators
//! already query; the rest are contiguous around them.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum RunStatus {
    Pending = 0,
    Distributed = 1,
    Running = 2,
    Success = 3,
    Failed = 4,
    Canceled = 5,
    Building = 6,
    WaitingBarrier = 7,
    Orphaned = 8,
}

impl RunStatus {
    pub const ALL: [RunStatus; 9] = [
        RunStatus::Pending,
        RunStatus::Distributed,
        RunStatus::Running,
        RunStatus::Success,
        RunStatus::Failed,
        RunStatus::Canceled,
        RunStatus::Building,
        RunStatus::WaitingBarrier,
        RunStatus::Orphaned,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        RunStatus::ALL.get(code as usize).copied()
    }

    /// Terminal for this attempt. A new attempt may still be created for the
    /// same rank after `Canceled`, `Failed` or `Orphaned`.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunStatus::Success | RunStatus::Failed | RunStatus::Canceled | RunStatus::Orphaned
        )
    }

    /// Placed on a client and holding one of its slots.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            RunStatus::Distributed
                | RunStatus::Building
                | RunStatus::WaitingBarrier
                | RunStatus::Running
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            RunStatus::Pending => "Pending",
            RunStatus::Distributed => "Distributed",
            RunStatus::Running => "Running",
            RunStatus::Success => "Success",
            RunStatus::Failed => "Failed",
            RunStatus::Canceled => "Canceled",
            RunStatus::Building => "Building",
            RunStatus::WaitingBarrier => "WaitingBarrier",
            RunStatus::Orphaned => "Orphaned",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl From<RunStatus> for u8 {
    fn from(s: RunStatus) -> u8 {
        s.code()
    }
}

impl TryFrom<u8> for RunStatus {
    type Error = String;

    fn try_from(code: u8) -> Result<Self, Self::Error> {
        RunStatus::from_code(code).ok_or_else(|| format!("unknown run status code {code}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunEvent {
    Dispatched,
    BuildStarted,
    BarrierWait,
    Started,
    Succeeded,
    Failed,
    CancelRequested,
    MarkedOrphan,
}

impl RunEvent {
    pub const ALL: [RunEvent; 8] = [
        RunEvent::Dispatched,
        RunEvent::BuildStarted,
        RunEvent::BarrierWait,
        RunEvent::Started,
        RunEvent::Succeeded,
        RunEvent::Failed,
        RunEvent::CancelRequested,
        RunEvent::MarkedOrphan,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal run transition: {event:?} while {current}")]
pub struct IllegalTransition {
    pub current: RunStatus,
    pub event: RunEvent,
}

/// Next status for `current` under `event`.
///
/// Pending -> Distributed -> Building -> (WaitingBarrier) -> Running ->
/// {Success | Failed | Canceled}. Any dispatched, non-terminal state may be
/// canceled, failed or orphaned; a pending run may only be dispatched or
/// canceled.
pub fn run_status_transition(
    current: RunStatus,
    event: RunEvent,
) -> Result<RunStatus, IllegalTransition> {
    use RunEvent as E;
    use RunStatus as S;

    let next = match (current, event) {
        (S::Pending, E::Dispatched) => S::Distributed,
        (S::Pending, E::CancelRequested) => S::Canceled,

        (S::Distributed, E::BuildStarted) => S::Building,
        (S::Distributed | S::Building, E::BarrierWait) => S::WaitingBarrier,
        (S::Distributed | S::Building | S::WaitingBarrier, E::Started) => S::Running,
        (S::Running, E::Succeeded) => S::Success,

        (s, E::Failed) if s.is_active() => S::Failed,
        (s, E::CancelRequested) if s.is_active() => S::Canceled,
        (s, E::MarkedOrphan) if s.is_active() => S::Orphaned,

        _ => return Err(IllegalTransition { current, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestStatus {
    Queued,
    Dispatching,
    Running,
    Completed,
    Canceled,
    Failed,
}

impl RequestStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RequestStatus::Completed | RequestStatus::Canceled | RequestStatus::Failed
        )
    }
}

impl fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_succeeds_to_code_3() {
        let next = run_status_transition(RunStatus::Running, RunEvent::Succeeded).unwrap();
        assert_eq!(next.code(), 3);
    }

    #[test]
    fn distributed_cancel_is_code_5() {
        let next = run_status_transition(RunStatus::Distributed, RunEvent::CancelRequested).unwrap();
        assert_eq!(next.code(), 5);
    }

    #[test]
    fn success_is_terminal() {
        let err = run_status_transition(RunStatus::Success, RunEvent::Started).unwrap_err();
        assert_eq!(err.current, RunStatus::Success);
        assert_eq!(err.event, RunEvent::Started);
    }

    #[test]
    fn codes_round_trip() {
        for s in RunStatus::ALL {
            assert_eq!(RunStatus::from_code(s.code()), Some(s));
        }
        assert_eq!(RunStatus::from_code(9), None);
        assert_eq!(serde_json::to_string(&RunStatus::Canceled).unwrap(), "5");
    }

    // Closure: the full 9x8 table, written out independently of the match
    // above. `None` marks an illegal pair.
    #[test]
    fn exhaustive_transition_table() {
        use RunEvent as E;
        use RunStatus as S;
        let table: &[(S, [Option<S>; 8])] = &[
            // Dispatched, BuildStarted, BarrierWait, Started, Succeeded, Failed, CancelRequested, MarkedOrphan
            (S::Pending, [Some(S::Distributed), None, None, None, None, None, Some(S::Canceled), None]),
            (
                S::Distributed,
                [
                    None,
                    Some(S::Building),
                    Some(S::WaitingBarrier),
                    Some(S::Running),
                    None,
                    Some(S::Failed),
                    Some(S::Canceled),
                    Some(S::Orphaned),
                ],
            ),
            (
                S::Building,
                [
                    None,
                    None,
                    Some(S::WaitingBarrier),
                    Some(S::Running),
                    None,
                    Some(S::Failed),
                    Some(S::Canceled),
                    Some(S::Orphaned),
                ],
            ),
            (
                S::WaitingBarrier,
                [
                    None,
                    None,
                    None,
                    Some(S::Running),
                    None,
                    Some(S::Failed),
                    Some(S::Canceled),
                    Some(S::Orphaned),
                ],
            ),
            (
                S::Running,
                [
                    None,
                    None,
                    None,
                    None,
                    Some(S::Success),
                    Some(S::Failed),
                    Some(S::Canceled),
                    Some(S::Orphaned),
                ],
            ),
            (S::Success, [None; 8]),
            (S::Failed, [None; 8]),
            (S::Canceled, [None; 8]),
            (S::Orphaned, [None; 8]),
        ];
        assert_eq!(table.len(), RunStatus::ALL.len());
        let events = [
            E::Dispatched,
            E::BuildStarted,
            E::BarrierWait,
            E::Started,
            E::Succeeded,
            E::Failed,
            E::CancelRequested,
            E::MarkedOrphan,
        ];
        for (status, row) in table {
            for (event, expected) in events.iter().zip(row.iter()) {
                let got = run_status_transition(*status, *event).ok();
                assert_eq!(got, *expected, "({status:?}, {event:?})");
            }
        }
    }

    #[test]
    fn terminal_states_have_no_successors() {
        for s in RunStatus::ALL.into_iter().filter(|s| s.is_terminal()) {
            for e in RunEvent::ALL {
                assert!(run_status_transition(s, e).is_err());
            }
        }
    }
}
