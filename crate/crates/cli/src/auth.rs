//! Bearer-token authentication against a static token file.
//!
//! The file is a JSON array:
//!
//! ```json
//! [{"token": "s3cret", "principal": "alice", "role": "admin", "expiry": "2030-01-01T00:00:00Z"}]
//! ```
//!
//! Anything implementing [`Authenticator`] can replace it.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const ADMIN_ROLE: &str = "admin";

/// A resolved, unexpired session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub token: String,
    pub principal: String,
    pub role: String,
    pub expiry: DateTime<Utc>,
}

impl SessionToken {
    pub fn is_admin(&self) -> bool {
        self.role == ADMIN_ROLE
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthError {
    Missing,
    Malformed,
    Unknown,
    Expired {
        principal: String,
        at: DateTime<Utc>,
    },
}

impl std::fmt::Display for AuthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AuthError::Missing => {
                f.write_str("Please sign in: this request carries no access token.")
            }
            AuthError::Malformed => f.write_str(
                "The Authorization header is not understood; send `Authorization: Bearer <token>`.",
            ),
            AuthError::Unknown => {
                f.write_str("This access token is not recognised. Please sign in again.")
            }
            AuthError::Expired { principal, at } => write!(
                f,
                "The session for {principal} expired at {}. Please sign in again.",
                at.format("%Y-%m-%d %H:%M UTC")
            ),
        }
    }
}

impl std::error::Error for AuthError {}

pub trait Authenticator: Send + Sync {
    fn authenticate(&self, token: &str, now: DateTime<Utc>) -> Result<SessionToken, AuthError>;
}

/// Tokens loaded once from a JSON file.
#[derive(Debug, Default, Clone)]
pub struct TokenStore {
    tokens: HashMap<String, SessionToken>,
}

impl TokenStore {
    pub fn new(tokens: impl IntoIterator<Item = SessionToken>) -> anyhow::Result<Self> {
        let mut map = HashMap::new();
        for t in tokens {
            anyhow::ensure!(
                !t.token.is_empty(),
                "empty token for principal `{}`",
                t.principal
            );
            anyhow::ensure!(!t.principal.is_empty(), "token without a principal");
            if map.insert(t.token.clone(), t).is_some() {
                anyhow::bail!("a token is listed twice");
            }
        }
        Ok(TokenStore { tokens: map })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read token file {}: {e}", path.display()))?;
        let tokens: Vec<SessionToken> = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid token file {}: {e}", path.display()))?;
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Authenticator for TokenStore {
    fn authenticate(&self, token: &str, now: DateTime<Utc>) -> Result<SessionToken, AuthError> {
        let session = self.tokens.get(token).ok_or(AuthError::Unknown)?;
        if session.expiry <= now {
            return Err(AuthError::Expired {
                principal: session.principal.clone(),
                at: session.expiry,
            });
        }
        Ok(session.clone())
    }
}

/// The token from an `Authorization` header value.
pub fn bearer_token(header: Option<&str>) -> Result<&str, AuthError> {
    let value = header.ok_or(AuthError::Missing)?;
    let (scheme, token) = value.trim().split_once(' ').ok_or(AuthError::Malformed)?;
    let token = token.trim();
    if !scheme.eq_ignore_ascii_case("bearer") || token.is_empty() {
        return Err(AuthError::Malformed);
    }
    Ok(token)
}
