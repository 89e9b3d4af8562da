#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use atlas_cli::auth::{SessionToken, TokenStore};
use atlas_cli::server::{router, AppState};
use atlas_core::ingest::{ingest_dataset, IngestOptions};
use atlas_core::synth::{generate, Manifest, SynthSpec};
use atlas_core::Store;
use axum::body::{Body, Bytes};
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use chrono::{Duration, Utc};
use http_body_util::BodyExt;
use tempfile::TempDir;
use tower::ServiceExt;

pub const ADMIN: &str = "admin-token";
pub const USER: &str = "user-token";
pub const EXPIRED: &str = "expired-token";

pub fn tokens() -> TokenStore {
    let now = Utc::now();
    let t = |token: &str, principal: &str, role: &str, expiry| SessionToken {
        token: token.into(),
        principal: principal.into(),
        role: role.into(),
        expiry,
    };
    TokenStore::new([
        t(ADMIN, "alice", "admin", now + Duration::days(1)),
        t(USER, "bob", "user", now + Duration::days(1)),
        t(EXPIRED, "carol", "user", now - Duration::minutes(5)),
    ])
    .unwrap()
}

pub struct Api {
    pub dir: TempDir,
    pub state: Arc<AppState>,
    pub app: Router,
    pub manifest: Manifest,
    pub dataset_id: i64,
    pub root_lfn: String,
}

impl Api {
    pub fn tree(&self) -> PathBuf {
        self.dir.path().join("tree")
    }

    pub fn lfns(&self, rel_paths: &[String]) -> Vec<String> {
        rel_paths
            .iter()
            .map(|r| format!("{}/{r}", self.root_lfn))
            .collect()
    }

    pub async fn call(
        &self,
        method: Method,
        uri: &str,
        token: Option<&str>,
        body: Option<String>,
    ) -> Reply {
        call(&self.app, method, uri, token, body).await
    }
}

pub fn api(spec: &SynthSpec) -> Api {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("tree");
    let manifest = generate(spec, &tree).unwrap();
    let store = Arc::new(Store::open(dir.path().join("atlas.db")).unwrap());
    let opts = IngestOptions::new(&manifest.dataset_name, &manifest.dataset_name);
    let report = ingest_dataset(&store, &tree, &opts).unwrap();
    let state = Arc::new(AppState::new(store, Arc::new(tokens())));
    Api {
        app: router(state.clone()),
        state,
        manifest,
        dataset_id: report.dataset_id,
        root_lfn: opts.root_lfn(),
        dir,
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn code(&self) -> String {
        self.json()["code"].as_str().unwrap_or_default().to_string()
    }
}

pub async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    token: Option<&str>,
    body: Option<String>,
) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    Reply {
        status,
        headers,
        body,
    }
}
