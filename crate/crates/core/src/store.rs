//! SQLite-backed catalog store: schema creation, connections, integrity checks.
//!
//! One writer connection is guarded by a mutex (single-writer rule); readers
//! open their own read-only connections, so in WAL mode they only ever see
//! committed ingests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard, TryLockError};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: i64 = 1;

/// Tables holding catalog data, in creation order.
pub const CATALOG_TABLES: [&str; 14] = [
    "dataset_category",
    "dataset",
    "subject",
    "imagefile",
    "assessment_type",
    "clinical_variable",
    "score_code",
    "assessment_value",
    "pipeline",
    "algorithm",
    "pipeline_algorithm",
    "app_user",
    "app_group",
    "app_user_group",
];

pub const META_TABLE: &str = "schema_meta";

const DDL: &str = r#"
CREATE TABLE dataset_category (
    id          INTEGER PRIMARY KEY,
    name        TEXT NOT NULL UNIQUE CHECK (name <> ''),
    description TEXT NOT NULL DEFAULT ''
);
CREATE TABLE dataset (
    id          INTEGER PRIMARY KEY,
    category_id INTEGER NOT NULL REFERENCES dataset_category(id),
    name        TEXT NOT NULL CHECK (name <> ''),
    root_lfn    TEXT NOT NULL CHECK (root_lfn <> ''),
    owner       TEXT NOT NULL DEFAULT '',
    created_on  TEXT NOT NULL,
    UNIQUE (category_id, name)
);
CREATE TABLE subject (
    id           INTEGER PRIMARY KEY,
    dataset_id   INTEGER NOT NULL REFERENCES dataset(id),
    subject_code TEXT NOT NULL CHECK (subject_code <> ''),
    UNIQUE (dataset_id, subject_code)
);
CREATE TABLE imagefile (
    id             INTEGER PRIMARY KEY,
    dataset_id     INTEGER NOT NULL REFERENCES dataset(id),
    subject_id     INTEGER REFERENCES subject(id),
    subject_dir    TEXT NOT NULL,
    file_name      TEXT NOT NULL CHECK (file_name <> ''),
    lfn            TEXT NOT NULL UNIQUE,
    file_type      TEXT NOT NULL,
    description    TEXT NOT NULL DEFAULT '',
    added_on       TEXT NOT NULL,
    kind           TEXT NOT NULL CHECK (kind IN ('scan', 'summary', 'unknown')),
    project        TEXT,
    token_dataset  TEXT,
    subject_code   TEXT,
    timepoint      TEXT,
    field_strength TEXT,
    modality       TEXT,
    state          TEXT CHECK (state IS NULL OR state IN ('ORIG', 'PROC')),
    version        TEXT,
    CHECK (substr(lfn, -length(file_name)) = file_name),
    CHECK (file_type = '' OR substr(file_name, -length(file_type)) = file_type)
);
CREATE TABLE assessment_type (
    id         INTEGER PRIMARY KEY,
    dataset_id INTEGER NOT NULL REFERENCES dataset(id),
    name       TEXT NOT NULL CHECK (name <> ''),
    UNIQUE (dataset_id, name)
);
CREATE TABLE clinical_variable (
    id                 INTEGER PRIMARY KEY,
    assessment_type_id INTEGER NOT NULL REFERENCES assessment_type(id),
    name               TEXT NOT NULL CHECK (name <> ''),
    value_kind         TEXT NOT NULL CHECK (value_kind IN ('numeric', 'text', 'date')),
    description        TEXT NOT NULL DEFAULT '',
    comments           TEXT NOT NULL DEFAULT '',
    UNIQUE (assessment_type_id, name)
);
CREATE TABLE score_code (
    id          INTEGER PRIMARY KEY,
    variable_id INTEGER NOT NULL REFERENCES clinical_variable(id),
    code        TEXT NOT NULL,
    label       TEXT NOT NULL,
    UNIQUE (variable_id, code)
);
CREATE TABLE assessment_value (
    id          INTEGER PRIMARY KEY,
    subject_id  INTEGER NOT NULL REFERENCES subject(id),
    variable_id INTEGER NOT NULL REFERENCES clinical_variable(id),
    occurrence  INTEGER NOT NULL DEFAULT 0 CHECK (occurrence >= 0),
    value       TEXT NOT NULL,
    num_value   REAL,
    UNIQUE (subject_id, variable_id, occurrence)
);
CREATE TABLE pipeline (
    id          INTEGER PRIMARY KEY,
    name        TEXT NOT NULL CHECK (name <> ''),
    lfn         TEXT NOT NULL CHECK (lfn <> ''),
    version     TEXT NOT NULL,
    description TEXT NOT NULL DEFAULT '',
    owner       TEXT NOT NULL DEFAULT '',
    UNIQUE (name, version)
);
CREATE TABLE algorithm (
    id    INTEGER PRIMARY KEY,
    name  TEXT NOT NULL CHECK (name <> ''),
    lfn   TEXT NOT NULL CHECK (lfn <> ''),
    owner TEXT NOT NULL DEFAULT '',
    UNIQUE (name, lfn)
);
CREATE TABLE pipeline_algorithm (
    pipeline_id  INTEGER NOT NULL REFERENCES pipeline(id),
    algorithm_id INTEGER NOT NULL REFERENCES algorithm(id),
    position     INTEGER NOT NULL CHECK (position >= 0),
    PRIMARY KEY (pipeline_id, algorithm_id),
    UNIQUE (pipeline_id, position)
);
CREATE TABLE app_user (
    id    INTEGER PRIMARY KEY,
    login TEXT NOT NULL UNIQUE CHECK (login <> ''),
    role  TEXT NOT NULL DEFAULT ''
);
CREATE TABLE app_group (
    id   INTEGER PRIMARY KEY,
    name TEXT NOT NULL UNIQUE CHECK (name <> '')
);
CREATE TABLE app_user_group (
    user_id  INTEGER NOT NULL REFERENCES app_user(id),
    group_id INTEGER NOT NULL REFERENCES app_group(id),
    PRIMARY KEY (user_id, group_id)
);
CREATE TABLE schema_meta (
    id         INTEGER PRIMARY KEY CHECK (id = 1),
    version    INTEGER NOT NULL,
    created_on TEXT NOT NULL
);
"#;

const INDEXES: &str = r#"
CREATE INDEX IF NOT EXISTS idx_subject_code ON subject(subject_code);
CREATE INDEX IF NOT EXISTS idx_imagefile_dataset ON imagefile(dataset_id);
CREATE INDEX IF NOT EXISTS idx_imagefile_subject ON imagefile(subject_id);
CREATE INDEX IF NOT EXISTS idx_variable_name ON clinical_variable(name);
CREATE INDEX IF NOT EXISTS idx_value_variable_value ON assessment_value(variable_id, value);
CREATE INDEX IF NOT EXISTS idx_value_variable_num ON assessment_value(variable_id, num_value);
CREATE INDEX IF NOT EXISTS idx_pipeline_algorithm_algorithm ON pipeline_algorithm(algorithm_id);
"#;

/// Foreign keys checked by [`Store::validate_integrity`]: (table, column, referenced table).
const FOREIGN_KEYS: [(&str, &str, &str); 13] = [
    ("dataset", "category_id", "dataset_category"),
    ("subject", "dataset_id", "dataset"),
    ("imagefile", "dataset_id", "dataset"),
    ("imagefile", "subject_id", "subject"),
    ("assessment_type", "dataset_id", "dataset"),
    ("clinical_variable", "assessment_type_id", "assessment_type"),
    ("score_code", "variable_id", "clinical_variable"),
    ("assessment_value", "subject_id", "subject"),
    ("assessment_value", "variable_id", "clinical_variable"),
    ("pipeline_algorithm", "pipeline_id", "pipeline"),
    ("pipeline_algorithm", "algorithm_id", "algorithm"),
    ("app_user_group", "user_id", "app_user"),
    ("app_user_group", "group_id", "app_group"),
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("existing schema is incompatible: {0}")]
    SchemaVersionMismatch(String),
    #[error("another ingest is in progress")]
    WriterBusy,
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaInfo {
    pub version: i64,
    /// Every table in the store, sorted.
    pub tables: Vec<String>,
    /// True when this call created the schema.
    pub created: bool,
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn user_tables(conn: &Connection) -> rusqlite::Result<Vec<String>> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name",
    )?;
    let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
    rows.collect()
}

fn table_columns(conn: &Connection, table: &str) -> rusqlite::Result<Vec<(String, String, bool)>> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info(\"{table}\")"))?;
    let rows = stmt.query_map([], |r| {
        Ok((
            r.get::<_, String>(1)?,
            r.get::<_, String>(2)?,
            r.get::<_, i64>(3)? != 0,
        ))
    })?;
    rows.collect()
}

/// Create the catalog schema, or verify an existing one. Idempotent.
pub fn create_schema(conn: &Connection) -> Result<SchemaInfo, StoreError> {
    let existing = user_tables(conn)?;
    let created = existing.is_empty();
    if created {
        let tx = conn.unchecked_transaction()?;
        tx.execute_batch(DDL)?;
        tx.execute_batch(INDEXES)?;
        tx.execute(
            "INSERT INTO schema_meta (id, version, created_on) VALUES (1, ?1, ?2)",
            rusqlite::params![SCHEMA_VERSION, now_timestamp()],
        )?;
        tx.commit()?;
    } else {
        verify_schema(conn, &existing)?;
        conn.execute_batch(INDEXES)?;
    }
    Ok(SchemaInfo {
        version: SCHEMA_VERSION,
        tables: user_tables(conn)?,
        created,
    })
}

fn verify_schema(conn: &Connection, existing: &[String]) -> Result<(), StoreError> {
    if !existing.iter().any(|t| t == META_TABLE) {
        return Err(StoreError::SchemaVersionMismatch(format!(
            "store holds tables {existing:?} but no {META_TABLE}"
        )));
    }
    let version: i64 = conn
        .query_row("SELECT version FROM schema_meta WHERE id = 1", [], |r| {
            r.get(0)
        })
        .map_err(|e| StoreError::SchemaVersionMismatch(format!("unreadable {META_TABLE}: {e}")))?;
    if version != SCHEMA_VERSION {
        return Err(StoreError::SchemaVersionMismatch(format!(
            "store is at version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    let reference = Connection::open_in_memory()?;
    reference.execute_batch(DDL)?;
    for table in CATALOG_TABLES.iter().chain(std::iter::once(&META_TABLE)) {
        let want = table_columns(&reference, table)?;
        let have = table_columns(conn, table)?;
        if want != have {
            return Err(StoreError::SchemaVersionMismatch(format!(
                "table `{table}` has an unexpected shape"
            )));
        }
    }
    Ok(())
}

fn configure(conn: &Connection) -> rusqlite::Result<()> {
    conn.busy_timeout(std::time::Duration::from_secs(30))?;
    conn.pragma_update(None, "foreign_keys", true)?;
    Ok(())
}

/// Handle to an initialized catalog database file.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    writer: Mutex<Connection>,
    generation: AtomicU64,
}

impl Store {
    /// Open (or create) the database file and ensure the schema is current.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let conn = Connection::open(&path)
            .map_err(|e| StoreError::Unavailable(format!("{}: {e}", path.display())))?;
        // Fails on unwritable locations before any DDL runs.
        conn.query_row("PRAGMA journal_mode = WAL", [], |r| r.get::<_, String>(0))
            .map_err(|e| StoreError::Unavailable(format!("{}: {e}", path.display())))?;
        configure(&conn)?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        create_schema(&conn)?;
        Ok(Store {
            path,
            writer: Mutex::new(conn),
            generation: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Exclusive write session; blocks until any running writer finishes.
    pub fn writer(&self) -> MutexGuard<'_, Connection> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Exclusive write session, or [`StoreError::WriterBusy`] if one is held.
    pub fn try_writer(&self) -> Result<MutexGuard<'_, Connection>, StoreError> {
        match self.writer.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
            Err(TryLockError::WouldBlock) => Err(StoreError::WriterBusy),
        }
    }

    /// A fresh read-only connection.
    pub fn reader(&self) -> Result<Connection, StoreError> {
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY
                | OpenFlags::SQLITE_OPEN_NO_MUTEX
                | OpenFlags::SQLITE_OPEN_URI,
        )
        .map_err(|e| StoreError::Unavailable(format!("{}: {e}", self.path.display())))?;
        configure(&conn)?;
        conn.pragma_update(None, "query_only", true)?;
        Ok(conn)
    }

    /// Incremented after every committed write; caches key on it.
    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }

    pub fn bump_generation(&self) {
        self.generation.fetch_add(1, Ordering::AcqRel);
    }

    pub fn schema_info(&self) -> Result<SchemaInfo, StoreError> {
        let conn = self.reader()?;
        Ok(SchemaInfo {
            version: SCHEMA_VERSION,
            tables: user_tables(&conn)?,
            created: false,
        })
    }

    pub fn validate_integrity(&self) -> Result<IntegrityReport, StoreError> {
        validate_integrity(&self.reader()?)
    }

    /// Deterministic text dump of the schema and every row.
    pub fn dump(&self) -> Result<String, StoreError> {
        dump(&self.reader()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DanglingReference {
    pub table: String,
    pub column: String,
    pub referenced_table: String,
    pub rows: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub dangling: Vec<DanglingReference>,
    /// lfns of images with no linked subject.
    pub orphan_images: Vec<String>,
    /// (variable_id, code) pairs that occur more than once.
    pub duplicate_codes: Vec<(i64, String)>,
    /// Rows whose subject lives in a different dataset than their variable or image.
    pub cross_dataset_rows: u64,
    /// Pipelines whose algorithm positions are not `0..n`.
    pub non_contiguous_pipelines: Vec<i64>,
}

impl IntegrityReport {
    pub fn violation_count(&self) -> usize {
        self.dangling.len()
            + self.orphan_images.len()
            + self.duplicate_codes.len()
            + usize::from(self.cross_dataset_rows > 0)
            + self.non_contiguous_pipelines.len()
    }

    pub fn is_clean(&self) -> bool {
        self.violation_count() == 0
    }
}

pub fn validate_integrity(conn: &Connection) -> Result<IntegrityReport, StoreError> {
    let mut report = IntegrityReport::default();
    for (table, column, referenced) in FOREIGN_KEYS {
        let rows: i64 = conn.query_row(
            &format!(
                "SELECT COUNT(*) FROM {table} WHERE {column} IS NOT NULL \
                 AND {column} NOT IN (SELECT id FROM {referenced})"
            ),
            [],
            |r| r.get(0),
        )?;
        if rows > 0 {
            report.dangling.push(DanglingReference {
                table: table.into(),
                column: column.into(),
                referenced_table: referenced.into(),
                rows: rows as u64,
            });
        }
    }

    let mut stmt =
        conn.prepare("SELECT lfn FROM imagefile WHERE subject_id IS NULL ORDER BY lfn")?;
    report.orphan_images = stmt
        .query_map([], |r| r.get(0))?
        .collect::<rusqlite::Result<_>>()?;

    let mut stmt = conn.prepare(
        "SELECT variable_id, code FROM score_code GROUP BY variable_id, code \
         HAVING COUNT(*) > 1 ORDER BY variable_id, code",
    )?;
    report.duplicate_codes = stmt
        .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
        .collect::<rusqlite::Result<_>>()?;

    let value_mismatch: i64 = conn.query_row(
        "SELECT COUNT(*) FROM assessment_value av \
         JOIN subject s ON s.id = av.subject_id \
         JOIN clinical_variable v ON v.id = av.variable_id \
         JOIN assessment_type a ON a.id = v.assessment_type_id \
         WHERE s.dataset_id <> a.dataset_id",
        [],
        |r| r.get(0),
    )?;
    let image_mismatch: i64 = conn.query_row(
        "SELECT COUNT(*) FROM imagefile i JOIN subject s ON s.id = i.subject_id \
         WHERE s.dataset_id <> i.dataset_id",
        [],
        |r| r.get(0),
    )?;
    report.cross_dataset_rows = (value_mismatch + image_mismatch) as u64;

    let mut stmt = conn.prepare(
        "SELECT pipeline_id FROM pipeline_algorithm GROUP BY pipeline_id \
         HAVING MIN(position) <> 0 OR MAX(position) + 1 <> COUNT(*) ORDER BY pipeline_id",
    )?;
    report.non_contiguous_pipelines = stmt
        .query_map([], |r| r.get(0))?
        .collect::<rusqlite::Result<_>>()?;
    Ok(report)
}

pub fn dump(conn: &Connection) -> Result<String, StoreError> {
    let mut out = String::new();
    let mut stmt = conn.prepare(
        "SELECT type, name, COALESCE(sql, '') FROM sqlite_master \
         WHERE name NOT LIKE 'sqlite_%' ORDER BY type, name",
    )?;
    let objects: Vec<(String, String, String)> = stmt
        .query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
        .collect::<rusqlite::Result<_>>()?;
    let user_version: i64 = conn.query_row("PRAGMA user_version", [], |r| r.get(0))?;
    let _ = writeln!(out, "-- user_version {user_version}");
    for (kind, name, sql) in &objects {
        let _ = writeln!(out, "-- {kind} {name}\n{sql};");
        if kind != "table" {
            continue;
        }
        let mut rows = conn.prepare(&format!("SELECT * FROM \"{name}\" ORDER BY rowid"))?;
        let ncols = rows.column_count();
        let mut q = rows.query([])?;
        while let Some(row) = q.next()? {
            let mut cells = Vec::with_capacity(ncols);
            for i in 0..ncols {
                cells.push(render_value(row.get_ref(i)?));
            }
            let _ = writeln!(out, "{name}({})", cells.join(", "));
        }
    }
    Ok(out)
}

fn render_value(v: ValueRef<'_>) -> String {
    match v {
        ValueRef::Null => "NULL".into(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => format!("{f:?}"),
        ValueRef::Text(t) => format!("'{}'", String::from_utf8_lossy(t).replace('\'', "''")),
        ValueRef::Blob(b) => {
            let hex: String = b.iter().map(|x| format!("{x:02x}")).collect();
            format!("X'{hex}'")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("atlas.db")).unwrap();
        (dir, store)
    }

    #[test]
    fn schema_is_created_once() {
        let (dir, store) = temp_store();
        let info = store.schema_info().unwrap();
        assert_eq!(info.tables.len(), CATALOG_TABLES.len() + 1);
        for t in CATALOG_TABLES {
            assert!(info.tables.iter().any(|x| x == t), "missing {t}");
        }
        let before = store.dump().unwrap();
        drop(store);
        let store = Store::open(dir.path().join("atlas.db")).unwrap();
        let again = create_schema(&store.writer()).unwrap();
        assert!(!again.created);
        assert_eq!(store.dump().unwrap(), before);
    }

    #[test]
    fn incompatible_store_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.db");
        Connection::open(&path)
            .unwrap()
            .execute_batch("CREATE TABLE imagefile (x INTEGER)")
            .unwrap();
        assert!(matches!(
            Store::open(&path),
            Err(StoreError::SchemaVersionMismatch(_))
        ));

        let path = dir.path().join("shape.db");
        let conn = Connection::open(&path).unwrap();
        create_schema(&conn).unwrap();
        conn.execute_batch("ALTER TABLE subject ADD COLUMN extra TEXT")
            .unwrap();
        drop(conn);
        assert!(matches!(
            Store::open(&path),
            Err(StoreError::SchemaVersionMismatch(m)) if m.contains("subject")
        ));

        let path = dir.path().join("version.db");
        let conn = Connection::open(&path).unwrap();
        create_schema(&conn).unwrap();
        conn.execute_batch("UPDATE schema_meta SET version = 99")
            .unwrap();
        drop(conn);
        assert!(matches!(
            Store::open(&path),
            Err(StoreError::SchemaVersionMismatch(_))
        ));
    }

    #[test]
    fn unreachable_store_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let err = Store::open(dir.path().join("missing/dir/atlas.db")).unwrap_err();
        assert!(matches!(err, StoreError::Unavailable(_)));
    }

    #[test]
    fn duplicate_lfn_violates_constraint() {
        let (_dir, store) = temp_store();
        let conn = store.writer();
        conn.execute_batch(
            "INSERT INTO dataset_category (id, name) VALUES (1, 'C');
             INSERT INTO dataset (id, category_id, name, root_lfn, created_on) VALUES (1, 1, 'D', '/d', 't');",
        )
        .unwrap();
        let insert = "INSERT INTO imagefile (dataset_id, subject_dir, file_name, lfn, file_type, added_on, kind) \
                      VALUES (1, 's', 'f.nii', '/d/s/f.nii', '.nii', 't', 'scan')";
        conn.execute(insert, []).unwrap();
        let err = conn.execute(insert, []).unwrap_err();
        assert!(err.to_string().contains("UNIQUE"), "{err}");
    }

    #[test]
    fn lfn_must_end_with_file_name() {
        let (_dir, store) = temp_store();
        let conn = store.writer();
        conn.execute_batch(
            "INSERT INTO dataset_category (id, name) VALUES (1, 'C');
             INSERT INTO dataset (id, category_id, name, root_lfn, created_on) VALUES (1, 1, 'D', '/d', 't');",
        )
        .unwrap();
        let err = conn
            .execute(
                "INSERT INTO imagefile (dataset_id, subject_dir, file_name, lfn, file_type, added_on, kind) \
                 VALUES (1, 's', 'f.nii', '/d/s/g.nii', '.nii', 't', 'scan')",
                [],
            )
            .unwrap_err();
        assert!(err.to_string().contains("CHECK"), "{err}");
    }

    #[test]
    fn empty_store_has_clean_report() {
        let (_dir, store) = temp_store();
        assert!(store.validate_integrity().unwrap().is_clean());
    }

    #[test]
    fn reader_cannot_write() {
        let (_dir, store) = temp_store();
        let r = store.reader().unwrap();
        assert!(r
            .execute("INSERT INTO dataset_category (name) VALUES ('x')", [])
            .is_err());
    }

    #[test]
    fn try_writer_reports_busy() {
        let (_dir, store) = temp_store();
        let _held = store.writer();
        assert!(matches!(store.try_writer(), Err(StoreError::WriterBusy)));
    }
}
