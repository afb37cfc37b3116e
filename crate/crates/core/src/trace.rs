//! Structured run trace.
//!
//! Every observable engine action becomes one [`TraceEvent`], serialized as
//! one JSON line. Serialization is deterministic: field order is fixed by the
//! struct, `extra` is a sorted map, and all numbers come from the same
//! arithmetic on every run, so identical runs produce byte-identical files.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    AppArrival,
    RequestSpawn,
    Admitted,
    PrefillDone,
    CallStart,
    OffloadDecided,
    OffloadStarted,
    OffloadDone,
    ReservationTick,
    UploadStarted,
    UploadStall,
    UploadDone,
    CallFinishEarly,
    CallFinishLate,
    Resumed,
    Evicted,
    RequestDone,
    AppDone,
    PartitionUpdated,
    CriticalInversion,
    UtilSample,
    Truncated,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceEvent {
    pub t_ms: f64,
    pub kind: TraceKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub request_id: Option<u64>,
    /// Application instance id (serialized as `app_id`).
    #[serde(rename = "app_id", skip_serializing_if = "Option::is_none", default)]
    pub instance: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub agent_type: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub blocks: Option<u64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub extra: BTreeMap<String, Value>,
}

impl TraceEvent {
    pub fn new(t_ms: f64, kind: TraceKind) -> Self {
        TraceEvent {
            t_ms,
            kind,
            request_id: None,
            instance: None,
            agent_type: None,
            blocks: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn req(mut self, id: u64) -> Self {
        self.request_id = Some(id);
        self
    }

    pub fn inst(mut self, id: u64) -> Self {
        self.instance = Some(id);
        self
    }

    pub fn agent(mut self, ty: &str) -> Self {
        self.agent_type = Some(ty.to_string());
        self
    }

    pub fn blocks(mut self, n: u64) -> Self {
        self.blocks = Some(n);
        self
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn extra_f64(&self, key: &str) -> Option<f64> {
        self.extra.get(key).and_then(Value::as_f64)
    }

    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.extra.get(key).and_then(Value::as_str)
    }
}

/// Serialize a trace as JSON lines (one event per line, trailing newline).
pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("trace events always serialize"));
        out.push('\n');
    }
    out
}

/// Parse a JSONL trace; blank lines are ignored.
pub fn from_jsonl(text: &str) -> Result<Vec<TraceEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
