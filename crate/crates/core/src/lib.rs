//! Shared domain types for the gridforge desktop-grid orchestrator.
//!
//! Everything in this crate is either a plain value type or a pure function
//! over values. The manager, the client agent, the simulation harness and the
//! command-line client all speak in these types, and every wire body is the
//! JSON serialization of one of them.

pub mod aggregate;
pub mod archive;
pub mod events;
pub mod hash;
pub mod header;
pub mod ids;
pub mod model;
pub mod snippets;
pub mod status;
pub mod store;
pub mod time;
pub mod validate;
pub mod wire;

pub use aggregate::{aggregate_outputs, AggregateError, RankedBundle, RequestArchive};
pub use header::{parse_header_args, render_header_args, HeaderParseError, RunHeader};
pub use ids::{ClientId, DomainId, FileId, ProcessId, RequestId, RoomId, RunId, UserId};
pub use model::*;
pub use status::{run_status_transition, IllegalTransition, RequestStatus, RunEvent, RunStatus};
pub use validate::{validate_request, Catalog, FieldError, RequestForm, ValidationError};
