//! Pipeline and algorithm catalog.
//!
//! Descriptors arrive as JSON documents:
//!
//! ```json
//! {
//!   "name": "civet-run",
//!   "lfn": "/grid/vo.neugrid.eu/pipelines/civet.sh",
//!   "version": "1.0",
//!   "description": "cortical thickness",
//!   "owner": "alice",
//!   "algorithms": [
//!     {"name": "skullstrip", "lfn": "/grid/vo.neugrid.eu/alg/bet.sh"},
//!     {"name": "segment", "lfn": "/grid/vo.neugrid.eu/alg/fast.sh", "owner": "bob"}
//!   ]
//! }
//! ```
//!
//! `name`, `lfn` and `version` are mandatory, as are each algorithm's `name`
//! and `lfn`. An algorithm is identified by its `(name, lfn)` pair and reused
//! across pipelines.

use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AlgorithmDef, PipelineDef};
use crate::store::{Store, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("mandatory field `{0}` is null or empty")]
    NullField(String),
    #[error("pipeline `{name}` version `{version}` is already indexed")]
    DuplicatePipeline { name: String, version: String },
    #[error("algorithm `{0}` is listed twice in one pipeline")]
    DuplicateAlgorithm(String),
    #[error("pipeline {0} not found")]
    PipelineNotFound(i64),
    #[error("malformed pipeline descriptor: {0}")]
    Malformed(String),
    #[error("spool file error: {0}")]
    Spool(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<rusqlite::Error> for PipelineError {
    fn from(e: rusqlite::Error) -> Self {
        PipelineError::Store(StoreError::Sqlite(e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmRef {
    pub name: String,
    pub lfn: String,
    #[serde(default)]
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDescriptor {
    pub name: String,
    pub lfn: String,
    pub version: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub owner: String,
    #[serde(default)]
    pub algorithms: Vec<AlgorithmRef>,
}

/// Wire shape with every field optional so nulls surface as [`PipelineError::NullField`].
#[derive(Deserialize)]
struct RawAlgorithm {
    name: Option<String>,
    lfn: Option<String>,
    owner: Option<String>,
}

#[derive(Deserialize)]
struct RawDescriptor {
    name: Option<String>,
    lfn: Option<String>,
    version: Option<String>,
    description: Option<String>,
    owner: Option<String>,
    algorithms: Option<Vec<RawAlgorithm>>,
}

fn required(value: Option<String>, field: &str) -> Result<String, PipelineError> {
    match value {
        Some(v) if !v.trim().is_empty() => Ok(v.trim().to_string()),
        _ => Err(PipelineError::NullField(field.to_string())),
    }
}

impl PipelineDescriptor {
    /// Parse and validate a JSON descriptor.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let raw: RawDescriptor =
            serde_json::from_str(text).map_err(|e| PipelineError::Malformed(e.to_string()))?;
        let algorithms = raw
            .algorithms
            .unwrap_or_default()
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                Ok(AlgorithmRef {
                    name: required(a.name, &format!("algorithms[{i}].name"))?,
                    lfn: required(a.lfn, &format!("algorithms[{i}].lfn"))?,
                    owner: a.owner.unwrap_or_default(),
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(PipelineDescriptor {
            name: required(raw.name, "name")?,
            lfn: required(raw.lfn, "lfn")?,
            version: required(raw.version, "version")?,
            description: raw.description.unwrap_or_default(),
            owner: raw.owner.unwrap_or_default(),
            algorithms,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (field, value) in [
            ("name", &self.name),
            ("lfn", &self.lfn),
            ("version", &self.version),
        ] {
            if value.trim().is_empty() {
                return Err(PipelineError::NullField(field.into()));
            }
        }
        for (i, a) in self.algorithms.iter().enumerate() {
            if a.name.trim().is_empty() {
                return Err(PipelineError::NullField(format!("algorithms[{i}].name")));
            }
            if a.lfn.trim().is_empty() {
                return Err(PipelineError::NullField(format!("algorithms[{i}].lfn")));
            }
            if self.algorithms[..i]
                .iter()
                .any(|b| b.name == a.name && b.lfn == a.lfn)
            {
                return Err(PipelineError::DuplicateAlgorithm(a.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineFilter {
    /// Case-insensitive substring of the pipeline name.
    pub name: Option<String>,
    /// Exact owner.
    pub owner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: u64,
    pub page: u64,
    pub page_size: u64,
}

pub struct PipelineCatalog<'s> {
    store: &'s Store,
    spool_dir: PathBuf,
}

impl<'s> PipelineCatalog<'s> {
    pub fn new(store: &'s Store) -> Self {
        PipelineCatalog {
            store,
            spool_dir: std::env::temp_dir(),
        }
    }

    pub fn with_spool_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.spool_dir = dir.into();
        self
    }

    /// Index a descriptor file.
    pub fn index_file(&self, path: &Path) -> Result<i64, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        self.index_json(&text)
    }

    pub fn index_pipeline(&self, descriptor: &PipelineDescriptor) -> Result<i64, PipelineError> {
        let text = serde_json::to_string(descriptor)
            .map_err(|e| PipelineError::Malformed(e.to_string()))?;
        self.index_json(&text)
    }

    /// Stage the document in a spool file, re-read and validate it, then commit.
    pub fn index_json(&self, text: &str) -> Result<i64, PipelineError> {
        let mut spool = tempfile::Builder::new()
            .prefix("pipeline-")
            .suffix(".json")
            .tempfile_in(&self.spool_dir)?;
        spool.write_all(text.as_bytes())?;
        spool.flush()?;
        spool.seek(SeekFrom::Start(0))?;
        let mut staged = String::new();
        spool.read_to_string(&mut staged)?;

        let descriptor = PipelineDescriptor::from_json(&staged)?;
        descriptor.validate()?;
        let id = self.commit(&descriptor)?;
        self.store.bump_generation();
        Ok(id)
    }

    fn commit(&self, d: &PipelineDescriptor) -> Result<i64, PipelineError> {
        let mut conn = self.store.writer();
        let tx = conn.transaction()?;
        let exists: Option<i64> = tx
            .query_row(
                "SELECT id FROM pipeline WHERE name = ?1 AND version = ?2",
                params![d.name, d.version],
                |r| r.get(0),
            )
            .optional()?;
        if exists.is_some() {
            return Err(PipelineError::DuplicatePipeline {
                name: d.name.clone(),
                version: d.version.clone(),
            });
        }
        tx.execute(
            "INSERT INTO pipeline (name, lfn, version, description, owner) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![d.name, d.lfn, d.version, d.description, d.owner],
        )?;
        let pipeline_id = tx.last_insert_rowid();
        for (position, a) in d.algorithms.iter().enumerate() {
            tx.execute(
                "INSERT OR IGNORE INTO algorithm (name, lfn, owner) VALUES (?1, ?2, ?3)",
                params![a.name, a.lfn, a.owner],
            )?;
            let algorithm_id: i64 = tx.query_row(
                "SELECT id FROM algorithm WHERE name = ?1 AND lfn = ?2",
                params![a.name, a.lfn],
                |r| r.get(0),
            )?;
            tx.execute(
                "INSERT INTO pipeline_algorithm (pipeline_id, algorithm_id, position) VALUES (?1, ?2, ?3)",
                params![pipeline_id, algorithm_id, position as i64],
            )?;
        }
        tx.commit()?;
        Ok(pipeline_id)
    }

    pub fn list_pipelines(
        &self,
        filter: &PipelineFilter,
        page: u64,
        page_size: u64,
    ) -> Result<Page<PipelineDef>, PipelineError> {
        let conn = self.store.reader()?;
        let name = filter.name.as_deref().unwrap_or("");
        let owner = filter.owner.as_deref();
        let where_clause = "WHERE instr(lower(name), lower(?1)) > 0 AND (?2 IS NULL OR owner = ?2)";
        let total: i64 = conn.query_row(
            &format!("SELECT COUNT(*) FROM pipeline {where_clause}"),
            params![name, owner],
            |r| r.get(0),
        )?;
        let mut stmt = conn.prepare(&format!(
            "SELECT id, name, lfn, version, description, owner FROM pipeline {where_clause} \
             ORDER BY name, version, id LIMIT ?3 OFFSET ?4"
        ))?;
        let items = stmt
            .query_map(
                params![
                    name,
                    owner,
                    page_size as i64,
                    page.saturating_mul(page_size) as i64
                ],
                |r| {
                    Ok(PipelineDef {
                        id: r.get(0)?,
                        name: r.get(1)?,
                        lfn: r.get(2)?,
                        version: r.get(3)?,
                        description: r.get(4)?,
                        owner: r.get(5)?,
                    })
                },
            )?
            .collect::<rusqlite::Result<_>>()?;
        Ok(Page {
            items,
            total: total as u64,
            page,
            page_size,
        })
    }

    pub fn algorithms_of(&self, pipeline_id: i64) -> Result<Vec<AlgorithmDef>, PipelineError> {
        let conn = self.store.reader()?;
        let found: Option<i64> = conn
            .query_row(
                "SELECT id FROM pipeline WHERE id = ?1",
                [pipeline_id],
                |r| r.get(0),
            )
            .optional()?;
        if found.is_none() {
            return Err(PipelineError::PipelineNotFound(pipeline_id));
        }
        let mut stmt = conn.prepare(
            "SELECT a.id, a.name, a.lfn, a.owner FROM pipeline_algorithm pa \
             JOIN algorithm a ON a.id = pa.algorithm_id WHERE pa.pipeline_id = ?1 ORDER BY pa.position",
        )?;
        let algos = stmt
            .query_map([pipeline_id], |r| {
                Ok(AlgorithmDef {
                    id: r.get(0)?,
                    name: r.get(1)?,
                    lfn: r.get(2)?,
                    owner: r.get(3)?,
                })
            })?
            .collect::<rusqlite::Result<_>>()?;
        Ok(algos)
    }
}
