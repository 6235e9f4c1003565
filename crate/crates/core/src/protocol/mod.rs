//! Wire protocol between an auditor and the platform.
//!
//! Messages are single-line JSON objects over TCP, one per line. Every message
//! carries the protocol version `"v": 1` and a `"type"` tag.
//!
//! Requests:
//!
//! | type | fields |
//! |------|--------|
//! | `upload_audience` | `auditor_id`, `audience_handle`, `group`, `user_ids` |
//! | `query_relevance` | `auditor_id`, `audience_handle`, `content {id, text}`, `epsilon` |
//! | `budget` | `auditor_id` |
//! | `sample_audience` | `auditor_id`, `group`, `n` (reserved, always answered with `unimplemented`) |
//!
//! Responses:
//!
//! | type | fields |
//! |------|--------|
//! | `upload_audience_ok` | `accepted`, `matched`, `audience_handle` |
//! | `query_relevance_ok` | `group`, `noisy_counts`, `n_declared`, `epsilon_spent`, `remaining_budget` |
//! | `budget_ok` | `auditor_id`, `total`, `spent`, `remaining` |
//! | `error` | `code`, `message`, optional `remaining_budget` |
//!
//! No response type has a field for raw counts, per-user scores or traits.

mod client;
mod server;
mod service;

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use client::{
    client_audit, run_audit, AuditClient, AuditOutcome, AudienceUpload, ClientError, QueryReply,
    TcpTransport, Transport,
};
pub use server::{Server, ServerHandle};
pub use service::{
    query_seeds, release_histogram, PlatformService, PopulationSource, ServiceConfig,
    SyntheticPopulation,
};

pub const PROTOCOL_VERSION: u64 = 1;

/// Opaque description of the content being audited.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Content {
    pub id: String,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    UploadAudience {
        auditor_id: String,
        audience_handle: String,
        group: String,
        user_ids: Vec<String>,
    },
    QueryRelevance {
        auditor_id: String,
        audience_handle: String,
        content: Content,
        epsilon: f64,
    },
    Budget {
        auditor_id: String,
    },
    SampleAudience {
        auditor_id: String,
        group: String,
        n: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Response {
    UploadAudienceOk {
        accepted: u64,
        matched: u64,
        audience_handle: String,
    },
    QueryRelevanceOk {
        group: String,
        noisy_counts: Vec<f64>,
        n_declared: u64,
        epsilon_spent: f64,
        remaining_budget: f64,
    },
    BudgetOk {
        auditor_id: String,
        total: f64,
        spent: f64,
        remaining: f64,
    },
    Error {
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        remaining_budget: Option<f64>,
    },
}

impl Response {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Response::Error {
            code,
            message: message.into(),
            remaining_budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    InvalidEpsilon,
    InvalidAuditor,
    InvalidHandle,
    UnknownAudience,
    UnknownGroup,
    DuplicateHandle,
    DuplicateUserIds,
    MixedGroup,
    EmptyAudience,
    BudgetExhausted,
    Unimplemented,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Malformed => "malformed",
            ErrorCode::UnsupportedVersion => "unsupported_version",
            ErrorCode::InvalidEpsilon => "invalid_epsilon",
            ErrorCode::InvalidAuditor => "invalid_auditor",
            ErrorCode::InvalidHandle => "invalid_handle",
            ErrorCode::UnknownAudience => "unknown_audience",
            ErrorCode::UnknownGroup => "unknown_group",
            ErrorCode::DuplicateHandle => "duplicate_handle",
            ErrorCode::DuplicateUserIds => "duplicate_user_ids",
            ErrorCode::MixedGroup => "mixed_group",
            ErrorCode::EmptyAudience => "empty_audience",
            ErrorCode::BudgetExhausted => "budget_exhausted",
            ErrorCode::Unimplemented => "unimplemented",
            ErrorCode::Internal => "internal",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Serializes a message as one line of JSON (without the newline).
pub fn encode<T: Serialize>(message: &T) -> String {
    let mut value = serde_json::to_value(message).expect("protocol messages serialize");
    if let Value::Object(map) = &mut value {
        map.insert("v".into(), Value::from(PROTOCOL_VERSION));
    }
    value.to_string()
}

/// Parses one line. The error is ready to send back to the peer.
pub fn decode<T: DeserializeOwned>(line: &str) -> Result<T, Response> {
    let mut value: Value = serde_json::from_str(line)
        .map_err(|e| Response::error(ErrorCode::Malformed, format!("invalid JSON: {e}")))?;
    let map = value
        .as_object_mut()
        .ok_or_else(|| Response::error(ErrorCode::Malformed, "message must be a JSON object"))?;
    match map.remove("v") {
        Some(v) if v.as_u64() == Some(PROTOCOL_VERSION) => {}
        Some(v) => {
            return Err(Response::error(
                ErrorCode::UnsupportedVersion,
                format!("unsupported protocol version {v}, expected {PROTOCOL_VERSION}"),
            ))
        }
        None => {
            return Err(Response::error(
                ErrorCode::Malformed,
                "missing protocol version field `v`",
            ))
        }
    }
    serde_json::from_value(value)
        .map_err(|e| Response::error(ErrorCode::Malformed, format!("bad message: {e}")))
}
