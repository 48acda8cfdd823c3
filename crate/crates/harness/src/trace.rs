//! The totally ordered event log of a harness run.
//!
//! Dump format: JSON lines, one record per line, in sequence order. Each
//! line is an object with `seq` (0-based, gap-free), `at_ms` (milliseconds
//! since the collector was created), `source` (`manager`, `agent:<name>` or
//! `harness`) and the event's own fields, discriminated by `kind`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::time::Instant;

use gridforge_core::events::{EventSink, TraceEvent};
use gridforge_core::{RequestId, RequestStatus, RunStatus};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub at_ms: u64,
    pub source: String,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.records.iter().map(|r| &r.event)
    }

    /// Records with `seq >= from`.
    pub fn since(&self, from: u64) -> Trace {
        Trace {
            records: self.records.iter().filter(|r| r.seq >= from).cloned().collect(),
        }
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(r: impl BufRead) -> std::io::Result<Trace> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Trace { records })
    }

    /// Final status of every request submitted in this trace.
    pub fn request_outcomes(&self) -> BTreeMap<RequestId, RequestStatus> {
        let mut out = BTreeMap::new();
        for e in self.events() {
            match e {
                TraceEvent::RequestSubmitted { request_id, .. } => {
                    out.insert(*request_id, RequestStatus::Queued);
                }
                TraceEvent::RequestStatusChanged { request_id, status } => {
                    out.insert(*request_id, *status);
                }
                _ => {}
            }
        }
        out
    }

    /// `(request, rank)` pairs in the order their Success transition was
    /// recorded.
    pub fn successes(&self) -> Vec<(RequestId, u32)> {
        self.events()
            .filter_map(|e| match e {
                TraceEvent::RunTransition {
                    request_id,
                    rank,
                    to: RunStatus::Success,
                    ..
                } => Some((*request_id, *rank)),
                _ => None,
            })
            .collect()
    }

    /// The schedule-independent projection of the trace: what was asked and
    /// how each request ended, without timestamps, ports, client
    /// placement or interleaving. Two runs of the same script with the same
    /// seed agree on it.
    pub fn canonical(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let mut ranks: BTreeMap<RequestId, BTreeSet<u32>> = BTreeMap::new();
        for (req, rank) in self.successes() {
            ranks.entry(req).or_default().insert(rank);
        }
        for e in self.events() {
            if let TraceEvent::RequestSubmitted {
                request_id,
                user,
                repetitions,
                parallel,
                ..
            } = e
            {
                lines.push(format!("submitted {request_id} by {user} reps={repetitions} parallel={parallel}"));
            }
        }
        for (req, status) in self.request_outcomes() {
            let done: Vec<String> = ranks.get(&req).into_iter().flatten().map(u32::to_string).collect();
            lines.push(format!("request {req} {status:?} successes=[{}]", done.join(",")));
        }
        lines
    }
}

/// Serializes every emitted event into one ordered log.
pub struct Collector {
    start: Instant,
    records: Mutex<Vec<TraceRecord>>,
}

impl Default for Collector {
    fn default() -> Self {
        Collector {
            start: Instant::now(),
            records: Mutex::new(Vec::new()),
        }
    }
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Next sequence number to be assigned.
    pub fn next_seq(&self) -> u64 {
        self.records.lock().len() as u64
    }

    pub fn snapshot(&self) -> Trace {
        Trace {
            records: self.records.lock().clone(),
        }
    }

    pub fn since(&self, from: u64) -> Trace {
        Trace {
            records: self.records.lock().get(from as usize..).unwrap_or_default().to_vec(),
        }
    }

    /// Runs `f` over the records from `from` without copying them.
    pub fn scan<R>(&self, from: u64, f: impl FnOnce(&[TraceRecord]) -> R) -> R {
        let records = self.records.lock();
        f(records.get(from as usize..).unwrap_or_default())
    }
}

impl EventSink for Collector {
    fn emit(&self, source: &str, event: TraceEvent) {
        let mut records = self.records.lock();
        let seq = records.len() as u64;
        records.push(TraceRecord {
            seq,
            at_ms: self.start.elapsed().as_millis() as u64,
            source: source.to_string(),
            event,
        });
    }
}
