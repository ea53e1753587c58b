//! Errors shared by the log reducers in the algorithm modules.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no {0} records in the log")]
    NoSamples(&'static str),
    #[error("moving-average window must be at least 1")]
    InvalidWindow,
    #[error("no data messages were transmitted")]
    NothingSent,
    #[error("malformed {tag} record: {detail}")]
    Malformed { tag: &'static str, detail: String },
}

pub(crate) fn field_u64(record: &crate::log::LogRecord, tag: &'static str, key: &str) -> Result<u64, MetricError> {
    record
        .payload
        .get(key)
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| MetricError::Malformed { tag, detail: format!("missing integer field {key:?}") })
}
