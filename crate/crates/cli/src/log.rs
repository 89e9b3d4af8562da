//! In-memory request log: who did what, with which parameters, and how it ended.

use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub timestamp: DateTime<Utc>,
    /// `None` when the request never authenticated.
    pub principal: Option<String>,
    pub role: Option<String>,
    /// `METHOD /path`.
    pub operation: String,
    /// Hex SHA-256 over the query string and body.
    pub params_digest: String,
    pub elapsed_ms: f64,
    /// HTTP status of the response.
    pub outcome: u16,
}

pub fn params_digest(query: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(query.as_bytes());
    h.update([0u8]);
    h.update(body);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default)]
pub struct RequestLog {
    entries: Mutex<Vec<RequestLogEntry>>,
}

impl RequestLog {
    pub fn push(&self, entry: RequestLogEntry) {
        tracing::info!(
            principal = entry.principal.as_deref().unwrap_or("-"),
            operation = %entry.operation,
            outcome = entry.outcome,
            elapsed_ms = entry.elapsed_ms,
            "request"
        );
        self.entries
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(entry);
    }

    pub fn entries(&self) -> Vec<RequestLogEntry> {
        self.entries
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries recorded for one principal.
    pub fn for_principal(&self, principal: &str) -> Vec<RequestLogEntry> {
        self.entries()
            .into_iter()
            .filter(|e| e.principal.as_deref() == Some(principal))
            .collect()
    }
}
