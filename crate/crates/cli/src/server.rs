//! JSON HTTP API over the catalog.
//!
//! Every route except `/health` sits behind bearer-token authentication.
//! Every request, including rejected ones, lands in the [`RequestLog`].
//! Errors are `{"code": ..., "message": ...}` bodies.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use atlas_core::export::{stamp_filename, ExportError, ExportFormat};
use atlas_core::ingest::{ingest_dataset, IngestError, IngestOptions, DEFAULT_LFN_PREFIX};
use atlas_core::pipeline::{PipelineCatalog, PipelineError, PipelineFilter};
use atlas_core::query::{
    FilterExpression, PredefinedParams, QueryError, SandboxError, DEFAULT_PAGE_SIZE,
};
use atlas_core::store::StoreError;
use atlas_core::{QueryEngine, Store};
use axum::body::{to_bytes, Body, Bytes};
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{from_fn_with_state, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::auth::{bearer_token, AuthError, Authenticator, SessionToken};
use crate::jobs::{export_to, QuerySource};
use crate::log::{params_digest, RequestLog, RequestLogEntry};

/// Largest request body accepted, in bytes.
pub const MAX_BODY_BYTES: usize = 4 * 1024 * 1024;

pub struct AppState {
    pub engine: Arc<QueryEngine>,
    pub auth: Arc<dyn Authenticator>,
    pub log: Arc<RequestLog>,
    pub lfn_prefix: String,
    pub spool_dir: PathBuf,
    last_query: Mutex<HashMap<String, QuerySource>>,
}

impl AppState {
    pub fn new(store: Arc<Store>, auth: Arc<dyn Authenticator>) -> Self {
        AppState {
            engine: Arc::new(QueryEngine::new(store)),
            auth,
            log: Arc::new(RequestLog::default()),
            lfn_prefix: DEFAULT_LFN_PREFIX.to_string(),
            spool_dir: std::env::temp_dir(),
            last_query: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_engine(mut self, engine: QueryEngine) -> Self {
        self.engine = Arc::new(engine);
        self
    }

    pub fn with_lfn_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.lfn_prefix = prefix.into();
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        self.engine.store()
    }

    fn remember(&self, principal: &str, source: QuerySource) {
        self.last_query
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(principal.to_string(), source);
    }

    /// The most recent successful query of `principal`, which `/export` serializes.
    pub fn last_query(&self, principal: &str) -> Option<QuerySource> {
        self.last_query
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(principal)
            .cloned()
    }
}

// ---- errors ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        let code = match e {
            AuthError::Missing => "MissingToken",
            AuthError::Malformed => "MalformedToken",
            AuthError::Unknown => "UnknownToken",
            AuthError::Expired { .. } => "ExpiredToken",
        };
        ApiError::new(StatusCode::UNAUTHORIZED, code, e.to_string())
    }
}

fn store_error(e: &StoreError) -> ApiError {
    match e {
        StoreError::WriterBusy => {
            ApiError::new(StatusCode::CONFLICT, "IngestInProgress", e.to_string())
        }
        _ => ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "StoreError",
            e.to_string(),
        ),
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            QueryError::UnknownQueryId(_) => (S::NOT_FOUND, "UnknownQueryId"),
            QueryError::MissingParam(_) => (S::BAD_REQUEST, "MissingParam"),
            QueryError::NotFound(_) => (S::NOT_FOUND, "NotFound"),
            QueryError::TypeMismatch { .. } => (S::BAD_REQUEST, "TypeMismatch"),
            QueryError::UnknownVariable(_) => (S::BAD_REQUEST, "UnknownVariable"),
            QueryError::AmbiguousVariable { .. } => (S::BAD_REQUEST, "AmbiguousVariable"),
            QueryError::InvalidFilter(_) => (S::BAD_REQUEST, "InvalidFilter"),
            QueryError::InvalidPage(_) => (S::BAD_REQUEST, "InvalidPage"),
            QueryError::Sandbox(s) => {
                let code = match s {
                    SandboxError::ParseError(_) => "ParseError",
                    SandboxError::MutationForbidden(_) => "MutationForbidden",
                    SandboxError::MultiStatement => "MultiStatement",
                    SandboxError::NonWhitelistedTable(_) => "NonWhitelistedTable",
                    SandboxError::Forbidden(_) => "Forbidden",
                    SandboxError::Timeout(_) => "Timeout",
                };
                let status = match s {
                    SandboxError::ParseError(_) => S::BAD_REQUEST,
                    SandboxError::Timeout(_) => S::REQUEST_TIMEOUT,
                    _ => S::FORBIDDEN,
                };
                (status, code)
            }
            QueryError::Store(s) => return store_error(s),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            PipelineError::NullField(_) => (S::BAD_REQUEST, "NullField"),
            PipelineError::DuplicatePipeline { .. } => (S::CONFLICT, "DuplicatePipeline"),
            PipelineError::DuplicateAlgorithm(_) => (S::BAD_REQUEST, "DuplicateAlgorithm"),
            PipelineError::PipelineNotFound(_) => (S::NOT_FOUND, "NotFound"),
            PipelineError::Malformed(_) => (S::BAD_REQUEST, "MalformedDescriptor"),
            PipelineError::Spool(_) => (S::INTERNAL_SERVER_ERROR, "SpoolError"),
            PipelineError::Store(s) => return store_error(s),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            IngestError::Store(s) => return store_error(s),
            IngestError::DuplicateDataset { .. } => (S::CONFLICT, "DuplicateDataset"),
            IngestError::Io { .. } => (S::BAD_REQUEST, "UnreadableDataset"),
            IngestError::InvalidOptions(_) => (S::BAD_REQUEST, "InvalidOptions"),
            _ => (S::UNPROCESSABLE_ENTITY, "IngestFailed"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ExportError> for ApiError {
    fn from(e: ExportError) -> Self {
        use StatusCode as S;
        match e {
            ExportError::Query(q) => q.into(),
            ExportError::UnknownFormat(_) => {
                ApiError::new(S::BAD_REQUEST, "UnknownFormat", e.to_string())
            }
            ExportError::MissingDefaultField(_) | ExportError::InvalidFieldName(_) => {
                ApiError::new(S::UNPROCESSABLE_ENTITY, "NotExportable", e.to_string())
            }
            ExportError::UnrepresentableInXml { .. } => ApiError::new(
                S::UNPROCESSABLE_ENTITY,
                "UnrepresentableInXml",
                e.to_string(),
            ),
            _ => ApiError::new(S::INTERNAL_SERVER_ERROR, "ExportFailed", e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run blocking store work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "Internal",
            format!("worker failed: {e}"),
        )
    })?
}

fn json_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn path_id(p: Result<Path<i64>, PathRejection>) -> ApiResult<i64> {
    p.map(|Path(id)| id)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query_params<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct PageParams {
    pub page: Option<u32>,
    pub page_size: Option<u32>,
}

impl PageParams {
    fn resolve(self) -> (u32, u32) {
        (
            self.page.unwrap_or(0),
            self.page_size.unwrap_or(DEFAULT_PAGE_SIZE),
        )
    }
}

// ---- middleware ----

async fn log_requests(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let started = Instant::now();
    let timestamp = Utc::now();
    let operation = format!("{} {}", req.method(), req.uri().path());
    let query = req.uri().query().unwrap_or("").to_string();
    let (parts, body) = req.into_parts();
    let (response, digest) = match to_bytes(body, MAX_BODY_BYTES).await {
        Ok(bytes) => {
            let digest = params_digest(&query, &bytes);
            let req = Request::from_parts(parts, Body::from(bytes));
            (next.run(req).await, digest)
        }
        Err(_) => (
            ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "BodyTooLarge",
                "request body is too large",
            )
            .into_response(),
            params_digest(&query, b""),
        ),
    };
    let session = response.extensions().get::<SessionToken>();
    st.log.push(RequestLogEntry {
        timestamp,
        principal: session.map(|s| s.principal.clone()),
        role: session.map(|s| s.role.clone()),
        operation,
        params_digest: digest,
        elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
        outcome: response.status().as_u16(),
    });
    response
}

async fn require_session(
    State(st): State<Arc<AppState>>,
    mut req: Request,
    next: Next,
) -> Response {
    let header = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok());
    let session = match bearer_token(header).and_then(|t| st.auth.authenticate(t, Utc::now())) {
        Ok(s) => s,
        Err(e) => return ApiError::from(e).into_response(),
    };
    req.extensions_mut().insert(session.clone());
    let mut response = next.run(req).await;
    response.extensions_mut().insert(session);
    response
}

// ---- routing ----

/// The full service.
pub fn router(state: Arc<AppState>) -> Router {
    with_middleware(state, api_routes())
}

/// Authenticated routes, without middleware.
pub fn api_routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/datasets", get(list_datasets))
        .route("/datasets/{id}/subdatasets", get(list_subdatasets))
        .route("/subdatasets/{id}/variables", get(list_variables))
        .route("/variables/{id}/dictionary", get(dictionary))
        .route("/query", post(run_filter))
        .route("/query/compile", post(compile_filter))
        .route("/query/sql", post(run_sql))
        .route("/query/predefined", post(run_predefined))
        .route("/export", get(export))
        .route("/pipelines", get(list_pipelines).post(add_pipeline))
        .route("/pipelines/{id}/algorithms", get(pipeline_algorithms))
        .route("/ingest", post(ingest))
}

/// Wrap `protected` in authentication, add `/health`, and log everything.
pub fn with_middleware(state: Arc<AppState>, protected: Router<Arc<AppState>>) -> Router {
    Router::new()
        .route("/health", get(health))
        .merge(protected.route_layer(from_fn_with_state(state.clone(), require_session)))
        .fallback(not_found)
        .layer(from_fn_with_state(state.clone(), log_requests))
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NoSuchRoute", "no such route")
}

async fn health(State(st): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let info = blocking(move || st.store().schema_info().map_err(|e| store_error(&e))).await?;
    Ok(Json(
        serde_json::json!({"status": "ok", "schema_version": info.version}),
    ))
}

async fn list_datasets(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let listing = blocking(move || Ok(st.engine.list_datasets()?)).await?;
    Ok(Json(listing).into_response())
}

async fn list_subdatasets(
    State(st): State<Arc<AppState>>,
    id: Result<Path<i64>, PathRejection>,
) -> ApiResult<Response> {
    let id = path_id(id)?;
    let types = blocking(move || Ok(st.engine.list_subdatasets(id)?)).await?;
    Ok(Json(types).into_response())
}

async fn list_variables(
    State(st): State<Arc<AppState>>,
    id: Result<Path<i64>, PathRejection>,
) -> ApiResult<Response> {
    let id = path_id(id)?;
    let vars = blocking(move || Ok(st.engine.list_variables(id)?)).await?;
    Ok(Json(vars).into_response())
}

async fn dictionary(
    State(st): State<Arc<AppState>>,
    id: Result<Path<i64>, PathRejection>,
) -> ApiResult<Response> {
    let id = path_id(id)?;
    let meta = blocking(move || Ok(st.engine.variable_metadata(id)?)).await?;
    Ok(Json(meta).into_response())
}

async fn run_filter(
    State(st): State<Arc<AppState>>,
    Extension(session): Extension<SessionToken>,
    page: Result<Query<PageParams>, QueryRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let (page, page_size) = query_params(page)?.resolve();
    let filter: FilterExpression = json_body(&body)?;
    let result = blocking(move || {
        let compiled = st.engine.compile_filter(&filter)?;
        let result = st.engine.execute(&compiled, page, page_size)?;
        st.remember(&session.principal, QuerySource::Compiled(compiled));
        Ok(result)
    })
    .await?;
    Ok(Json(result).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompiledSql {
    /// Self-contained SQL with literals inlined, ready for `/query/sql`.
    pub sql: String,
    pub columns: Vec<String>,
}

async fn compile_filter(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let filter: FilterExpression = json_body(&body)?;
    let compiled = blocking(move || {
        let columns = st.engine.compile_filter(&filter)?.columns;
        Ok(CompiledSql {
            sql: st.engine.copy_sql(&filter)?,
            columns,
        })
    })
    .await?;
    Ok(Json(compiled).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SqlRequest {
    pub sql: String,
}

async fn run_sql(
    State(st): State<Arc<AppState>>,
    Extension(session): Extension<SessionToken>,
    page: Result<Query<PageParams>, QueryRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let (page, page_size) = query_params(page)?.resolve();
    let req: SqlRequest = json_body(&body)?;
    let result = blocking(move || {
        let result = st.engine.sandbox_execute(&req.sql, page, page_size)?;
        st.remember(&session.principal, QuerySource::Sql { sql: req.sql });
        Ok(result)
    })
    .await?;
    Ok(Json(result).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredefinedRequest {
    pub query_id: String,
    #[serde(flatten)]
    pub params: PredefinedParams,
}

async fn run_predefined(
    State(st): State<Arc<AppState>>,
    Extension(session): Extension<SessionToken>,
    page: Result<Query<PageParams>, QueryRejection>,
    body: Bytes,
) -> ApiResult<Response> {
    let (page, page_size) = query_params(page)?.resolve();
    let req: PredefinedRequest = json_body(&body)?;
    let result = blocking(move || {
        let compiled = st.engine.predefined_query(&req.query_id, &req.params)?;
        let result = st.engine.execute(&compiled, page, page_size)?;
        st.remember(&session.principal, QuerySource::Compiled(compiled));
        Ok(result)
    })
    .await?;
    Ok(Json(result).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ExportParams {
    pub format: Option<String>,
}

async fn export(
    State(st): State<Arc<AppState>>,
    Extension(session): Extension<SessionToken>,
    params: Result<Query<ExportParams>, QueryRejection>,
) -> ApiResult<Response> {
    let params = query_params(params)?;
    let format: ExportFormat = params.format.as_deref().unwrap_or("xml").parse()?;
    let source = st.last_query(&session.principal).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "NoQuery",
            "run a query before exporting its results",
        )
    })?;
    let (body, count) =
        blocking(move || Ok(export_to(&st.engine, &source, format, Vec::new())?)).await?;
    let filename = stamp_filename(format);
    let mut response = body.into_response();
    let headers = response.headers_mut();
    headers.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static(format.content_type()),
    );
    let disposition = format!("attachment; filename=\"{filename}\"");
    headers.insert(
        header::CONTENT_DISPOSITION,
        HeaderValue::from_str(&disposition).expect("stamped names are ASCII"),
    );
    headers.insert("x-total-records", HeaderValue::from(count));
    Ok(response)
}

#[derive(Debug, Default, Deserialize)]
pub struct PipelineListParams {
    pub name: Option<String>,
    pub owner: Option<String>,
    pub page: Option<u64>,
    pub page_size: Option<u64>,
}

async fn list_pipelines(
    State(st): State<Arc<AppState>>,
    params: Result<Query<PipelineListParams>, QueryRejection>,
) -> ApiResult<Response> {
    let p = query_params(params)?;
    let page = blocking(move || {
        let filter = PipelineFilter {
            name: p.name,
            owner: p.owner,
        };
        let size = p.page_size.unwrap_or(u64::from(DEFAULT_PAGE_SIZE));
        Ok(PipelineCatalog::new(st.store()).list_pipelines(&filter, p.page.unwrap_or(0), size)?)
    })
    .await?;
    Ok(Json(page).into_response())
}

async fn pipeline_algorithms(
    State(st): State<Arc<AppState>>,
    id: Result<Path<i64>, PathRejection>,
) -> ApiResult<Response> {
    let id = path_id(id)?;
    let algos = blocking(move || Ok(PipelineCatalog::new(st.store()).algorithms_of(id)?)).await?;
    Ok(Json(algos).into_response())
}

async fn add_pipeline(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let text =
        String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let id = blocking(move || {
        let catalog = PipelineCatalog::new(st.store()).with_spool_dir(&st.spool_dir);
        Ok(catalog.index_json(&text)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({"id": id}))).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestRequest {
    /// Dataset root directory on the server's filesystem.
    pub root: PathBuf,
    pub dataset: String,
    pub category: String,
    #[serde(default)]
    pub owner: Option<String>,
    #[serde(default)]
    pub replace: bool,
}

async fn ingest(
    State(st): State<Arc<AppState>>,
    Extension(session): Extension<SessionToken>,
    body: Bytes,
) -> ApiResult<Response> {
    if !session.is_admin() {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "AdminOnly",
            format!(
                "{} may not ingest datasets; ask an administrator",
                session.principal
            ),
        ));
    }
    let req: IngestRequest = json_body(&body)?;
    let report = blocking(move || {
        let mut opts = IngestOptions::new(&req.dataset, &req.category);
        opts.owner = req.owner.unwrap_or(session.principal);
        opts.replace = req.replace;
        opts.lfn_prefix = st.lfn_prefix.clone();
        Ok(ingest_dataset(st.store(), &req.root, &opts)?)
    })
    .await?;
    Ok(Json(report).into_response())
}
