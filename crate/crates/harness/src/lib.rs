//! Single-machine simulation of a gridforge deployment.
//!
//! [`Cluster`] starts a real manager and real agents on loopback with the
//! sandbox executor, scripted resource samplers and compressed monitor
//! periods. [`run_scenario`] drives a declarative [`Scenario`] against it,
//! injecting faults on time or trace triggers, and returns the [`Trace`]
//! collected from every component. [`assert_trace`] checks named
//! invariants over a trace.

pub mod cluster;
pub mod error;
pub mod properties;
pub mod scenario;
pub mod trace;
pub mod workload;

pub use cluster::{ClientSpec, Cluster, ClusterSpec, Node, NodeState};
pub use error::HarnessError;
pub use properties::{assert_trace, check, check_all, Property, PropertyError, Violation};
pub use scenario::{run_scenario, FaultEvent, FaultKind, Scenario, ScenarioOutcome, Submission, Trigger};
pub use trace::{Collector, Trace, TraceRecord};
pub use workload::Job;
