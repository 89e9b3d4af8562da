//! Retrieval over the catalog: cascading catalog lookups, dictionary
//! metadata, filter compilation, predefined queries and sandboxed SQL, all
//! returning paginated [`ResultPage`]s ordered deterministically.

pub mod filter;
pub mod predefined;
pub mod sandbox;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rusqlite::types::ValueRef;
use rusqlite::{params_from_iter, Connection, ErrorCode, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AssessmentType, ClinicalVariable, DataSet, DataSetCategory, Id, ScoreCode, ValueKind,
};
use crate::store::{Store, StoreError};

pub use filter::{
    Combinator, CompiledQuery, FilterExpression, Operand, Operator, Predicate, ResolvedVariable,
    SqlValue, VariableRef, DEFAULT_FIELDS,
};
pub use predefined::{PredefinedParams, PredefinedQuery};
pub use sandbox::SandboxError;

pub const DEFAULT_PAGE_SIZE: u32 = 300;
pub const MAX_PAGE_SIZE: u32 = 10_000;
pub const DEFAULT_SANDBOX_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("unknown predefined query `{0}`")]
    UnknownQueryId(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("type mismatch for `{variable}` with {op}: {reason}")]
    TypeMismatch {
        variable: String,
        op: String,
        reason: String,
    },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{name}` exists in several sub-datasets ({types}); select one")]
    AmbiguousVariable { name: String, types: String },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid page request: {0}")]
    InvalidPage(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<rusqlite::Error> for QueryError {
    fn from(e: rusqlite::Error) -> Self {
        QueryError::Store(StoreError::Sqlite(e))
    }
}

/// One page of a query result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPage {
    pub columns: Vec<String>,
    /// Column name -> raw value; NULL renders as the empty string.
    pub records: Vec<IndexMap<String, String>>,
    /// Row count of the whole result, identical on every page.
    pub total: u64,
    pub page: u32,
    pub page_size: u32,
    /// Store round-trip time for count plus page fetch.
    pub elapsed_ms: f64,
}

impl ResultPage {
    /// The "Total Records N - Displaying a - b" banner.
    pub fn banner(&self) -> String {
        let start = u64::from(self.page) * u64::from(self.page_size);
        let end = start + self.records.len() as u64;
        format!(
            "Total Records {} - Displaying {} - {}",
            self.total,
            start.min(self.total),
            end
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryListing {
    #[serde(flatten)]
    pub category: DataSetCategory,
    pub datasets: Vec<DataSet>,
}

/// A variable's full data-dictionary entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableMetadata {
    #[serde(flatten)]
    pub variable: ClinicalVariable,
    pub dataset_id: Id,
    pub assessment_type: String,
    pub codes: Vec<ScoreCode>,
}

impl VariableMetadata {
    pub fn label(&self, code: &str) -> Option<&str> {
        self.codes
            .iter()
            .find(|c| c.code == code)
            .map(|c| c.label.as_str())
    }
}

#[derive(Debug, Default)]
struct MetadataCache {
    generation: u64,
    variables: HashMap<Id, VariableMetadata>,
}

/// Query entry point. Cheap to share; each call opens its own read session.
#[derive(Debug)]
pub struct QueryEngine {
    store: Arc<Store>,
    cache: Mutex<MetadataCache>,
    sandbox_timeout: Duration,
}

pub(crate) fn render_value(v: ValueRef<'_>) -> String {
    match v {
        ValueRef::Null => String::new(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => f.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => b.iter().map(|x| format!("{x:02x}")).collect(),
    }
}

/// Column names made unique by suffixing repeats with `_2`, `_3`, ...
fn unique_columns(names: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(names.len());
    for name in names {
        let mut candidate = name.clone();
        let mut n = 2;
        while out.contains(&candidate) {
            candidate = format!("{name}_{n}");
            n += 1;
        }
        out.push(candidate);
    }
    out
}

fn check_page_size(page_size: u32) -> Result<(), QueryError> {
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(QueryError::InvalidPage(format!(
            "page_size must be between 1 and {MAX_PAGE_SIZE}, got {page_size}"
        )));
    }
    Ok(())
}

fn sandbox_error(e: rusqlite::Error, timeout: Duration) -> QueryError {
    match e.sqlite_error_code() {
        Some(ErrorCode::OperationInterrupted) => {
            SandboxError::Timeout(timeout.as_millis() as u64).into()
        }
        Some(ErrorCode::AuthorizationForStatementDenied) => {
            SandboxError::Forbidden("an operation outside the catalog tables".into()).into()
        }
        Some(ErrorCode::ReadOnly) => SandboxError::MutationForbidden("a write".into()).into(),
        _ => e.into(),
    }
}

/// Run `sql` (a bare SELECT) paginated on `conn`.
fn paged(
    conn: &Connection,
    sql: &str,
    bindings: &[SqlValue],
    page: u32,
    page_size: u32,
) -> rusqlite::Result<(Vec<String>, Vec<Vec<String>>, u64)> {
    let total: i64 = conn.query_row(
        &format!("SELECT COUNT(*) FROM ({sql})"),
        params_from_iter(bindings.iter()),
        |r| r.get(0),
    )?;
    let offset = i64::from(page).saturating_mul(i64::from(page_size));
    let mut params: Vec<SqlValue> = bindings.to_vec();
    params.push(SqlValue::Int(i64::from(page_size)));
    params.push(SqlValue::Int(offset));
    let mut stmt = conn.prepare(&format!("SELECT * FROM ({sql}) LIMIT ? OFFSET ?"))?;
    let columns = unique_columns(stmt.column_names().into_iter().map(String::from).collect());
    let width = columns.len();
    let mut rows = stmt.query(params_from_iter(params.iter()))?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        let mut values = Vec::with_capacity(width);
        for i in 0..width {
            values.push(render_value(row.get_ref(i)?));
        }
        out.push(values);
    }
    Ok((columns, out, total as u64))
}

fn stream_rows<E: From<QueryError>>(
    conn: &Connection,
    sql: &str,
    bindings: &[SqlValue],
    mut sink: impl FnMut(&[String], &[String]) -> Result<(), E>,
) -> Result<Vec<String>, E> {
    let mut stmt = conn.prepare(sql).map_err(QueryError::from)?;
    let columns = unique_columns(stmt.column_names().into_iter().map(String::from).collect());
    let mut rows = stmt
        .query(params_from_iter(bindings.iter()))
        .map_err(QueryError::from)?;
    let mut values = Vec::with_capacity(columns.len());
    while let Some(row) = rows.next().map_err(QueryError::from)? {
        values.clear();
        for i in 0..columns.len() {
            values.push(render_value(row.get_ref(i).map_err(QueryError::from)?));
        }
        sink(&columns, &values)?;
    }
    Ok(columns)
}

fn build_page(
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
    total: u64,
    page: u32,
    page_size: u32,
    started: Instant,
) -> ResultPage {
    let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
    let records = rows
        .into_iter()
        .map(|r| columns.iter().cloned().zip(r).collect())
        .collect();
    ResultPage {
        columns,
        records,
        total,
        page,
        page_size,
        elapsed_ms,
    }
}

impl QueryEngine {
    pub fn new(store: Arc<Store>) -> Self {
        QueryEngine {
            store,
            cache: Mutex::new(MetadataCache::default()),
            sandbox_timeout: DEFAULT_SANDBOX_TIMEOUT,
        }
    }

    pub fn with_sandbox_timeout(mut self, timeout: Duration) -> Self {
        self.sandbox_timeout = timeout;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    // ---- catalog ----

    pub fn list_datasets(&self) -> Result<Vec<CategoryListing>, QueryError> {
        let conn = self.store.reader()?;
        let mut stmt =
            conn.prepare("SELECT id, name, description FROM dataset_category ORDER BY name, id")?;
        let mut listings: Vec<CategoryListing> = stmt
            .query_map([], |r| {
                Ok(CategoryListing {
                    category: DataSetCategory {
                        id: r.get(0)?,
                        name: r.get(1)?,
                        description: r.get(2)?,
                    },
                    datasets: Vec::new(),
                })
            })?
            .collect::<Result<_, _>>()?;
        for ds in self.datasets(&conn, None)? {
            if let Some(l) = listings
                .iter_mut()
                .find(|l| l.category.id == ds.category_id)
            {
                l.datasets.push(ds);
            }
        }
        Ok(listings)
    }

    fn datasets(&self, conn: &Connection, name: Option<&str>) -> Result<Vec<DataSet>, QueryError> {
        let mut stmt = conn.prepare(
            "SELECT id, category_id, name, root_lfn, owner, created_on FROM dataset \
             WHERE ?1 IS NULL OR name = ?1 ORDER BY name, id",
        )?;
        let rows = stmt.query_map([name], |r| {
            Ok(DataSet {
                id: r.get(0)?,
                category_id: r.get(1)?,
                name: r.get(2)?,
                root_lfn: r.get(3)?,
                owner: r.get(4)?,
                created_on: r.get(5)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn dataset(&self, id: Id) -> Result<DataSet, QueryError> {
        let conn = self.store.reader()?;
        self.dataset_on(&conn, id)
    }

    fn dataset_on(&self, conn: &Connection, id: Id) -> Result<DataSet, QueryError> {
        conn.query_row(
            "SELECT id, category_id, name, root_lfn, owner, created_on FROM dataset WHERE id = ?1",
            [id],
            |r| {
                Ok(DataSet {
                    id: r.get(0)?,
                    category_id: r.get(1)?,
                    name: r.get(2)?,
                    root_lfn: r.get(3)?,
                    owner: r.get(4)?,
                    created_on: r.get(5)?,
                })
            },
        )
        .optional()?
        .ok_or_else(|| QueryError::NotFound(format!("dataset {id}")))
    }

    /// Dataset by name; names are only unique within a category.
    pub fn dataset_by_name(&self, name: &str) -> Result<DataSet, QueryError> {
        let conn = self.store.reader()?;
        let mut found = self.datasets(&conn, Some(name))?;
        match found.len() {
            0 => Err(QueryError::NotFound(format!("dataset `{name}`"))),
            1 => Ok(found.remove(0)),
            n => Err(QueryError::InvalidFilter(format!(
                "{n} datasets are named `{name}`; use a dataset id"
            ))),
        }
    }

    pub fn list_subdatasets(&self, dataset_id: Id) -> Result<Vec<AssessmentType>, QueryError> {
        let conn = self.store.reader()?;
        self.dataset_on(&conn, dataset_id)?;
        let mut stmt =
            conn.prepare("SELECT id, dataset_id, name FROM assessment_type WHERE dataset_id = ?1 ORDER BY name, id")?;
        let rows = stmt.query_map([dataset_id], |r| {
            Ok(AssessmentType {
                id: r.get(0)?,
                dataset_id: r.get(1)?,
                name: r.get(2)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    fn assessment_type_on(&self, conn: &Connection, id: Id) -> Result<AssessmentType, QueryError> {
        conn.query_row(
            "SELECT id, dataset_id, name FROM assessment_type WHERE id = ?1",
            [id],
            |r| {
                Ok(AssessmentType {
                    id: r.get(0)?,
                    dataset_id: r.get(1)?,
                    name: r.get(2)?,
                })
            },
        )
        .optional()?
        .ok_or_else(|| QueryError::NotFound(format!("sub-dataset {id}")))
    }

    pub fn list_variables(
        &self,
        assessment_type_id: Id,
    ) -> Result<Vec<ClinicalVariable>, QueryError> {
        let conn = self.store.reader()?;
        self.assessment_type_on(&conn, assessment_type_id)?;
        let mut stmt = conn.prepare(
            "SELECT id, assessment_type_id, name, value_kind, description, comments \
             FROM clinical_variable WHERE assessment_type_id = ?1 ORDER BY name, id",
        )?;
        let rows = stmt.query_map([assessment_type_id], variable_from_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Dictionary entry for a variable, served from a cache invalidated by ingests.
    pub fn variable_metadata(&self, variable_id: Id) -> Result<VariableMetadata, QueryError> {
        let generation = self.store.generation();
        {
            let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
            if cache.generation != generation {
                cache.variables.clear();
                cache.generation = generation;
            }
            if let Some(m) = cache.variables.get(&variable_id) {
                return Ok(m.clone());
            }
        }
        let conn = self.store.reader()?;
        let meta = load_metadata(&conn, variable_id)?;
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if cache.generation == generation {
            cache.variables.insert(variable_id, meta.clone());
        }
        Ok(meta)
    }

    /// Dictionary entry for a variable named within a dataset.
    pub fn variable_metadata_by_name(
        &self,
        dataset_id: Id,
        name: &str,
    ) -> Result<VariableMetadata, QueryError> {
        let var = self.find_variable(dataset_id, None, &VariableRef::Name(name.to_string()))?;
        self.variable_metadata(var.id)
    }

    /// Resolve a variable reference within a dataset, optionally one sub-dataset.
    pub fn find_variable(
        &self,
        dataset_id: Id,
        assessment_type_id: Option<Id>,
        var: &VariableRef,
    ) -> Result<ResolvedVariable, QueryError> {
        match var {
            VariableRef::Id(id) => {
                let meta = self.variable_metadata(*id).map_err(|e| match e {
                    QueryError::NotFound(_) => QueryError::UnknownVariable(var.to_string()),
                    other => other,
                })?;
                let in_scope = meta.dataset_id == dataset_id
                    && assessment_type_id.is_none_or(|t| t == meta.variable.assessment_type_id);
                if !in_scope {
                    return Err(QueryError::UnknownVariable(var.to_string()));
                }
                Ok(ResolvedVariable {
                    id: meta.variable.id,
                    name: meta.variable.name,
                    kind: meta.variable.value_kind,
                })
            }
            VariableRef::Name(name) => {
                let conn = self.store.reader()?;
                let mut stmt = conn.prepare(
                    "SELECT v.id, v.name, v.value_kind, t.name FROM clinical_variable v \
                     JOIN assessment_type t ON t.id = v.assessment_type_id \
                     WHERE t.dataset_id = ?1 AND v.name = ?2 AND (?3 IS NULL OR t.id = ?3) ORDER BY t.name",
                )?;
                let found: Vec<(Id, String, String, String)> = stmt
                    .query_map(
                        rusqlite::params![dataset_id, name, assessment_type_id],
                        |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
                    )?
                    .collect::<Result<_, _>>()?;
                match found.as_slice() {
                    [] => Err(QueryError::UnknownVariable(name.clone())),
                    [(id, name, kind, _)] => Ok(ResolvedVariable {
                        id: *id,
                        name: name.clone(),
                        kind: kind.parse().unwrap_or(ValueKind::Text),
                    }),
                    many => Err(QueryError::AmbiguousVariable {
                        name: name.clone(),
                        types: many
                            .iter()
                            .map(|f| f.3.as_str())
                            .collect::<Vec<_>>()
                            .join(", "),
                    }),
                }
            }
        }
    }

    // ---- filters ----

    fn prepare_filter(
        &self,
        f: &FilterExpression,
        inline: bool,
    ) -> Result<CompiledQuery, QueryError> {
        let conn = self.store.reader()?;
        let dataset = self.dataset_on(&conn, f.dataset_id)?;
        let label = match f.assessment_type_id {
            Some(t) => {
                let at = self.assessment_type_on(&conn, t)?;
                if at.dataset_id != dataset.id {
                    return Err(QueryError::InvalidFilter(format!(
                        "sub-dataset {t} does not belong to dataset {}",
                        dataset.id
                    )));
                }
                at.name
            }
            None => dataset.name,
        };
        drop(conn);
        let resolved = f
            .predicates
            .iter()
            .map(|p| self.find_variable(f.dataset_id, f.assessment_type_id, &p.variable))
            .collect::<Result<Vec<_>, _>>()?;
        filter::compile_resolved(f, &resolved, &label, inline)
    }

    /// Parameterized SELECT for a filter.
    pub fn compile_filter(&self, f: &FilterExpression) -> Result<CompiledQuery, QueryError> {
        self.prepare_filter(f, false)
    }

    /// The filter's SELECT with operands inlined as quoted literals, for hand editing.
    pub fn copy_sql(&self, f: &FilterExpression) -> Result<String, QueryError> {
        Ok(self.prepare_filter(f, true)?.sql_text)
    }

    pub fn execute(
        &self,
        q: &CompiledQuery,
        page: u32,
        page_size: u32,
    ) -> Result<ResultPage, QueryError> {
        check_page_size(page_size)?;
        let conn = self.store.reader()?;
        let started = Instant::now();
        let (columns, rows, total) = paged(&conn, &q.sql_text, &q.bindings, page, page_size)?;
        Ok(build_page(columns, rows, total, page, page_size, started))
    }

    /// Compile and execute in one step.
    pub fn query(
        &self,
        f: &FilterExpression,
        page: u32,
        page_size: u32,
    ) -> Result<ResultPage, QueryError> {
        let q = self.compile_filter(f)?;
        self.execute(&q, page, page_size)
    }

    /// Every row of a compiled query, in order, without materializing the result.
    pub fn stream<E: From<QueryError>>(
        &self,
        q: &CompiledQuery,
        sink: impl FnMut(&[String], &[String]) -> Result<(), E>,
    ) -> Result<Vec<String>, E> {
        let conn = self.store.reader().map_err(QueryError::from)?;
        stream_rows(&conn, &q.sql_text, &q.bindings, sink)
    }

    // ---- sandbox ----

    pub fn sandbox_execute(
        &self,
        raw_sql: &str,
        page: u32,
        page_size: u32,
    ) -> Result<ResultPage, QueryError> {
        check_page_size(page_size)?;
        let sql = sandbox::check(raw_sql)?;
        let conn = self.store.reader()?;
        sandbox::lock_down(&conn, self.sandbox_timeout)?;
        let started = Instant::now();
        let (columns, rows, total) = paged(&conn, &sql, &[], page, page_size)
            .map_err(|e| sandbox_error(e, self.sandbox_timeout))?;
        Ok(build_page(columns, rows, total, page, page_size, started))
    }

    /// Every row of a sandboxed query, in order.
    pub fn stream_sandboxed<E: From<QueryError>>(
        &self,
        raw_sql: &str,
        sink: impl FnMut(&[String], &[String]) -> Result<(), E>,
    ) -> Result<Vec<String>, E> {
        let sql = sandbox::check(raw_sql).map_err(QueryError::from)?;
        let conn = self.store.reader().map_err(QueryError::from)?;
        sandbox::lock_down(&conn, self.sandbox_timeout).map_err(QueryError::from)?;
        stream_rows(&conn, &sql, &[], sink)
    }

    // ---- predefined ----

    pub fn run_predefined(
        &self,
        query_id: &str,
        params: &PredefinedParams,
        page: u32,
        page_size: u32,
    ) -> Result<ResultPage, QueryError> {
        let q = self.predefined_query(query_id, params)?;
        self.execute(&q, page, page_size)
    }

    /// The compiled form of a predefined query.
    pub fn predefined_query(
        &self,
        query_id: &str,
        params: &PredefinedParams,
    ) -> Result<CompiledQuery, QueryError> {
        let id: PredefinedQuery = query_id.parse()?;
        if let (PredefinedQuery::SearchImagefilesInDataset, Some(ds)) = (id, params.dataset_id) {
            self.dataset(ds)?;
        }
        predefined::compile(id, params)
    }
}

fn variable_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<ClinicalVariable> {
    let kind: String = r.get(3)?;
    Ok(ClinicalVariable {
        id: r.get(0)?,
        assessment_type_id: r.get(1)?,
        name: r.get(2)?,
        value_kind: kind.parse().unwrap_or(ValueKind::Text),
        description: r.get(4)?,
        comments: r.get(5)?,
    })
}

fn load_metadata(conn: &Connection, variable_id: Id) -> Result<VariableMetadata, QueryError> {
    let found = conn
        .query_row(
            "SELECT v.id, v.assessment_type_id, v.name, v.value_kind, v.description, v.comments, \
             t.dataset_id, t.name FROM clinical_variable v \
             JOIN assessment_type t ON t.id = v.assessment_type_id WHERE v.id = ?1",
            [variable_id],
            |r| {
                Ok((
                    variable_from_row(r)?,
                    r.get::<_, Id>(6)?,
                    r.get::<_, String>(7)?,
                ))
            },
        )
        .optional()?;
    let (variable, dataset_id, assessment_type) =
        found.ok_or_else(|| QueryError::NotFound(format!("variable {variable_id}")))?;
    // Codes sort numerically when they are numbers ("9" before "10").
    let mut stmt = conn.prepare(
        "SELECT id, variable_id, code, label FROM score_code WHERE variable_id = ?1 \
         ORDER BY CAST(code AS REAL), code",
    )?;
    let codes = stmt
        .query_map([variable_id], |r| {
            Ok(ScoreCode {
                id: r.get(0)?,
                variable_id: r.get(1)?,
                code: r.get(2)?,
                label: r.get(3)?,
            })
        })?
        .collect::<Result<_, _>>()?;
    Ok(VariableMetadata {
        variable,
        dataset_id,
        assessment_type,
        codes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_columns_get_suffixes() {
        let cols = unique_columns(vec!["id".into(), "id".into(), "x".into(), "id".into()]);
        assert_eq!(cols, ["id", "id_2", "x", "id_3"]);
    }

    #[test]
    fn banner_matches_display_format() {
        let page = ResultPage {
            columns: vec![],
            records: vec![IndexMap::new(); 146],
            total: 146,
            page: 0,
            page_size: 300,
            elapsed_ms: 0.0,
        };
        assert_eq!(page.banner(), "Total Records 146 - Displaying 0 - 146");
    }

    #[test]
    fn page_size_bounds() {
        assert!(check_page_size(0).is_err());
        assert!(check_page_size(MAX_PAGE_SIZE + 1).is_err());
        assert!(check_page_size(300).is_ok());
    }
}
