//! Tagged, structured run log.
//!
//! Nodes write into their own [`LogBuffer`] during the compute phase; the
//! engine stamps and merges the buffers into the [`LogDocument`] at the phase
//! barrier, in node-id order. Serialization sorts every tag's records by
//! `(computation, round, node)` with emission order as the tie-break, so the
//! bytes never depend on how compute hooks were interleaved.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Map, Value};

use crate::network::NodeId;

/// Per-message fabric trace tags. Only recorded when listed in `logTags`.
pub const TRACE_TAGS: [&str; 3] = ["send", "deliver", "drop"];
/// Compute-hook failures. Always recorded.
pub const ERROR_TAG: &str = "error";

/// Which tags are kept.
///
/// With no explicit list every tag except the fabric trace tags is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagFilter {
    enabled: Option<BTreeSet<String>>,
}

impl TagFilter {
    pub fn all_but_trace() -> Self {
        TagFilter { enabled: None }
    }

    pub fn only<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TagFilter { enabled: Some(tags.into_iter().map(Into::into).collect()) }
    }

    pub fn from_list(tags: Option<&BTreeSet<String>>) -> Self {
        TagFilter { enabled: tags.cloned() }
    }

    pub fn is_enabled(&self, tag: &str) -> bool {
        if tag == ERROR_TAG {
            return true;
        }
        match &self.enabled {
            Some(set) => set.contains(tag),
            None => !TRACE_TAGS.contains(&tag),
        }
    }

    pub fn tracing(&self) -> bool {
        TRACE_TAGS.iter().any(|t| self.is_enabled(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub tag: String,
    pub computation: u64,
    pub round: u64,
    pub node: Option<NodeId>,
    pub payload: Value,
}

impl LogRecord {
    fn sort_key(&self) -> (u64, u64, Option<NodeId>) {
        (self.computation, self.round, self.node)
    }

    fn to_value(&self) -> Value {
        json!({
            "tag": self.tag,
            "computation": self.computation,
            "round": self.round,
            "node": self.node,
            "payload": self.payload,
        })
    }
}

/// Unstamped records staged by one writer during a phase.
#[derive(Debug, Clone)]
pub struct LogBuffer {
    filter: Arc<TagFilter>,
    pending: Vec<(String, Value)>,
}

impl LogBuffer {
    pub fn new(filter: Arc<TagFilter>) -> Self {
        LogBuffer { filter, pending: Vec::new() }
    }

    pub fn is_enabled(&self, tag: &str) -> bool {
        self.filter.is_enabled(tag)
    }

    pub fn append(&mut self, tag: &str, payload: Value) {
        if self.filter.is_enabled(tag) {
            self.pending.push((tag.to_owned(), payload));
        }
    }

    /// Builds the payload only when the tag is enabled.
    pub fn append_with(&mut self, tag: &str, payload: impl FnOnce() -> Value) {
        if self.filter.is_enabled(tag) {
            self.pending.push((tag.to_owned(), payload()));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    fn drain(&mut self) -> std::vec::Drain<'_, (String, Value)> {
        self.pending.drain(..)
    }
}

/// All records of a run plus a header echoing the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDocument {
    config: Value,
    data: BTreeMap<String, Vec<LogRecord>>,
}

impl LogDocument {
    pub fn new(config: Value) -> Self {
        LogDocument { config, data: BTreeMap::new() }
    }

    pub fn config(&self) -> &Value {
        &self.config
    }

    pub fn push(&mut self, record: LogRecord) {
        self.data.entry(record.tag.clone()).or_default().push(record);
    }

    /// Stamps and moves everything staged in `buffer`.
    pub fn absorb(&mut self, buffer: &mut LogBuffer, computation: u64, round: u64, node: Option<NodeId>) {
        for (tag, payload) in buffer.drain() {
            self.push(LogRecord { tag, computation, round, node, payload });
        }
    }

    pub fn records(&self, tag: &str) -> &[LogRecord] {
        self.data.get(tag).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.data.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.data.values().all(Vec::is_empty)
    }

    pub fn record_count(&self) -> usize {
        self.data.values().map(Vec::len).sum()
    }

    /// Sorts each tag's records into canonical order. Stable, so emission order breaks ties.
    pub fn canonicalize(&mut self) {
        for records in self.data.values_mut() {
            records.sort_by_key(LogRecord::sort_key);
        }
    }

    pub fn to_value(&self) -> Value {
        let mut data = Map::new();
        for (tag, records) in &self.data {
            let mut sorted: Vec<&LogRecord> = records.iter().collect();
            sorted.sort_by_key(|r| r.sort_key());
            data.insert(tag.clone(), Value::Array(sorted.into_iter().map(LogRecord::to_value).collect()));
        }
        json!({
            "header": {
                "config": self.config,
                "version": env!("CARGO_PKG_VERSION"),
            },
            "data": data,
        })
    }

    /// Canonical JSON text: sorted keys, canonical record order.
    pub fn serialize(&self) -> String {
        // serde_json's default map is ordered by key.
        serde_json::to_string(&self.to_value()).expect("log values are always serializable")
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.serialize())
    }
}
