use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{DomainId, FileId, ProcessId, RoomId};
use crate::model::RequestSpec;

/// Parameters as typed in a form: either a list or one comma-separated
/// string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParameterInput {
    List(Vec<String>),
    Joined(String),
}

impl Default for ParameterInput {
    fn default() -> Self {
        ParameterInput::List(Vec::new())
    }
}

/// A raw execution request as submitted, before any reference is resolved.
/// Domain, process, shared files and rooms may be given by name or by id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestForm {
    pub domain: String,
    pub process: String,
    pub repetitions: i64,
    pub parallel: Option<bool>,
    pub parameters: Option<ParameterInput>,
    pub needs_gpu: Option<bool>,
    pub same_machine: Option<bool>,
    pub shared_files: Vec<String>,
    pub rooms: Vec<String>,
}

/// Name and id lookups as seen by the submitting user.
pub trait Catalog {
    fn resolve_domain(&self, key: &str) -> Option<DomainId>;
    fn resolve_process(&self, key: &str) -> Option<ProcessId>;
    fn resolve_shared_file(&self, key: &str) -> Option<FileId>;
    fn resolve_room(&self, key: &str) -> Option<RoomId>;
    /// Largest slot count of any client in `rooms`, if known.
    fn max_client_slots(&self, rooms: &BTreeSet<RoomId>) -> Option<u32>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub struct ValidationError {
    pub fields: Vec<FieldError>,
}

impl ValidationError {
    pub fn single(field: &str, message: impl Into<String>) -> Self {
        ValidationError {
            fields: vec![FieldError {
                field: field.into(),
                message: message.into(),
            }],
        }
    }

    pub fn has_field(&self, field: &str) -> bool {
        self.fields.iter().any(|f| f.field == field)
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid request:")?;
        for e in &self.fields {
            write!(f, " {}: {};", e.field, e.message)?;
        }
        Ok(())
    }
}

/// Resolves and checks a request form, applying defaults (parallel, GPU and
/// same-machine off, no parameters). Every violated field is reported.
pub fn validate_request(
    form: &RequestForm,
    catalog: &dyn Catalog,
) -> Result<RequestSpec, ValidationError> {
    let mut errors = Vec::new();
    let mut err = |field: &str, message: String| {
        errors.push(FieldError {
            field: field.to_string(),
            message,
        })
    };

    let repetitions = match u32::try_from(form.repetitions) {
        Ok(r) if r >= 1 => Some(r),
        _ => {
            err("repetitions", format!("must be at least 1, got {}", form.repetitions));
            None
        }
    };

    let domain_id = catalog.resolve_domain(&form.domain);
    if domain_id.is_none() {
        err("domain", format!("unknown domain {:?}", form.domain));
    }
    let process_id = catalog.resolve_process(&form.process);
    if process_id.is_none() {
        err("process", format!("unknown process {:?}", form.process));
    }

    let mut shared_file_ids = BTreeSet::new();
    for key in &form.shared_files {
        match catalog.resolve_shared_file(key) {
            Some(id) => {
                shared_file_ids.insert(id);
            }
            None => err("shared_files", format!("unknown shared file {key:?}")),
        }
    }

    let mut room_ids = BTreeSet::new();
    if form.rooms.is_empty() {
        err("rooms", "at least one room is required".into());
    }
    for key in &form.rooms {
        match catalog.resolve_room(key) {
            Some(id) => {
                room_ids.insert(id);
            }
            None => err("rooms", format!("unknown room {key:?}")),
        }
    }

    let parameters = match form.parameters.clone().unwrap_or_default() {
        ParameterInput::Joined(s) if s.is_empty() => Vec::new(),
        ParameterInput::Joined(s) => s.split(',').map(|p| p.trim().to_string()).collect(),
        ParameterInput::List(list) => {
            if list.iter().any(|p| p.contains(',')) {
                err("parameters", "values may not contain commas".into());
            }
            list
        }
    };

    let same_machine = form.same_machine.unwrap_or(false);
    if let (true, Some(reps)) = (same_machine, repetitions) {
        if let Some(max) = catalog.max_client_slots(&room_ids) {
            if reps > max {
                err(
                    "repetitions",
                    format!("same_machine request needs {reps} slots but no client has more than {max}"),
                );
            }
        }
    }

    match (domain_id, process_id, repetitions) {
        (Some(domain_id), Some(process_id), Some(repetitions)) if errors.is_empty() => {
            Ok(RequestSpec {
                domain_id,
                process_id,
                repetitions,
                parallel: form.parallel.unwrap_or(false),
                parameters,
                needs_gpu: form.needs_gpu.unwrap_or(false),
                same_machine,
                shared_file_ids,
                room_ids,
            })
        }
        _ => Err(ValidationError { fields: errors }),
    }
}
