//! Dataset ingestion: crawl, parse, link, and commit one dataset in a single transaction.

pub mod clinical;
pub mod dictionary;
pub mod link;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rusqlite::{params, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clinical::{
    parse_clinical_csv, read_clinical_csv, ClinicalHeader, ClinicalRow, ClinicalTable, CsvOptions,
};
pub use dictionary::{parse_coded_values, parse_dictionary, DictionaryEntry};
pub use link::{link_images, Linkage, LinkedImage};

use crate::crawler::{self, CrawlError, DirNode, LayoutDescriptor, LayoutOptions};
use crate::naming::{builtin_registry, detect_convention, ConventionSpec, NamingError};
use crate::store::{now_timestamp, Store, StoreError};
use crate::values::{infer_kind, sort_key};

pub const DEFAULT_LFN_PREFIX: &str = "/grid/vo.neugrid.eu/data";
const CONVENTION_SAMPLE: usize = 500;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Crawl(#[from] CrawlError),
    #[error(transparent)]
    Naming(#[from] NamingError),
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("variable `{0}` is defined more than once")]
    DuplicateVariable(String),
    #[error("no subject id column (expected one of subject_code, subject_id, subject, id)")]
    MissingSubjectColumn,
    #[error("row at line {line} has {found} cells, header has {expected}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{file}: {source}")]
    InFile {
        file: String,
        #[source]
        source: Box<IngestError>,
    },
    #[error("file `{file}` names subject `{token}` but lives in directory `{dir}`")]
    ConflictingSubject {
        dir: String,
        file: String,
        token: String,
    },
    #[error("dataset `{name}` already exists in category `{category}` (use replace to re-ingest)")]
    DuplicateDataset { category: String, name: String },
    #[error("invalid ingest options: {0}")]
    InvalidOptions(String),
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<rusqlite::Error> for IngestError {
    fn from(e: rusqlite::Error) -> Self {
        IngestError::Store(StoreError::Sqlite(e))
    }
}

impl IngestError {
    fn in_file(self, file: &str) -> Self {
        IngestError::InFile {
            file: file.to_string(),
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub dataset_name: String,
    pub category_name: String,
    pub owner: String,
    /// lfns are `<lfn_prefix>/<dataset_name>/<path under the dataset root>`.
    pub lfn_prefix: String,
    pub replace: bool,
    pub csv: CsvOptions,
    pub layout: LayoutOptions,
    pub max_depth: usize,
    pub registry: Vec<ConventionSpec>,
    pub strict_convention: bool,
}

impl IngestOptions {
    pub fn new(dataset_name: impl Into<String>, category_name: impl Into<String>) -> Self {
        IngestOptions {
            dataset_name: dataset_name.into(),
            category_name: category_name.into(),
            owner: String::new(),
            lfn_prefix: DEFAULT_LFN_PREFIX.to_string(),
            replace: false,
            csv: CsvOptions::default(),
            layout: LayoutOptions::default(),
            max_depth: crawler::DEFAULT_MAX_DEPTH,
            registry: builtin_registry(),
            strict_convention: false,
        }
    }

    pub fn root_lfn(&self) -> String {
        format!(
            "{}/{}",
            self.lfn_prefix.trim_end_matches('/'),
            self.dataset_name
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dataset_id: i64,
    pub dataset_name: String,
    pub convention: Option<String>,
    pub sub_levels: usize,
    pub subjects_indexed: usize,
    pub images_indexed: usize,
    pub values_indexed: usize,
    pub variables_indexed: usize,
    pub orphan_images: usize,
    pub orphan_rows: usize,
    pub skipped_files: usize,
    pub warnings: Vec<String>,
}

/// A clinical value awaiting insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedValue {
    /// Index into [`IngestPlan::subjects`].
    pub subject: u32,
    /// Index into [`AssessmentPlan::variables`].
    pub variable: u32,
    pub occurrence: u32,
    len: u32,
    start: u64,
}

/// One clinical sub-dataset: a directory under `CLINICAL_VARIABLES` holding CSVs.
///
/// Raw values share one text buffer so that millions of cells stay compact.
#[derive(Debug, Clone, Default)]
pub struct AssessmentPlan {
    pub name: String,
    pub variables: Vec<DictionaryEntry>,
    /// Sorted by (subject, variable, occurrence).
    pub values: Vec<PlannedValue>,
    text: String,
}

impl AssessmentPlan {
    pub fn raw(&self, v: &PlannedValue) -> &str {
        &self.text[v.start as usize..][..v.len as usize]
    }

    fn push(&mut self, subject: u32, variable: u32, row: u32, raw: &str) {
        let start = self.text.len() as u64;
        self.text.push_str(raw);
        self.values.push(PlannedValue {
            subject,
            variable,
            occurrence: row,
            len: raw.len() as u32,
            start,
        });
    }

    /// Turn row sequence numbers into per-(subject, variable) occurrence counters.
    fn number_occurrences(&mut self) {
        self.values
            .sort_unstable_by_key(|v| (v.subject, v.variable, v.occurrence));
        let mut prev = None;
        let mut n = 0;
        for v in &mut self.values {
            let key = (v.subject, v.variable);
            n = if prev == Some(key) { n + 1 } else { 0 };
            prev = Some(key);
            v.occurrence = n;
        }
    }
}

/// Everything parsed from disk, ready to be written.
#[derive(Debug, Clone)]
pub struct IngestPlan {
    pub layout: LayoutDescriptor,
    pub convention: Option<ConventionSpec>,
    pub assessments: Vec<AssessmentPlan>,
    /// Subject codes from the clinical rows, in first-seen order.
    pub subjects: Vec<String>,
    pub linkage: Linkage,
    pub orphan_rows: usize,
    pub warnings: Vec<String>,
}

fn is_dictionary_file(name: &str) -> bool {
    let stem = name
        .rsplit_once('.')
        .map_or(name, |(s, _)| s)
        .to_ascii_lowercase();
    stem.contains("dictionary") || stem.ends_with("_dict") || stem == "dict"
}

fn is_csv(node: &DirNode) -> bool {
    !node.is_dir() && node.name.to_ascii_lowercase().ends_with(".csv")
}

/// Directories under the clinical root that directly contain CSV files, as
/// (path relative to the clinical root, csv file names).
fn clinical_dirs(node: &DirNode, prefix: &str, out: &mut Vec<(String, Vec<String>)>) {
    let csvs: Vec<String> = node
        .children
        .iter()
        .filter(|c| is_csv(c))
        .map(|c| c.name.clone())
        .collect();
    if !csvs.is_empty() {
        out.push((prefix.to_string(), csvs));
    }
    for child in node.children.iter().filter(|c| c.is_dir()) {
        let rel = if prefix.is_empty() {
            child.name.clone()
        } else {
            format!("{prefix}/{}", child.name)
        };
        clinical_dirs(child, &rel, out);
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parse a dataset tree into an [`IngestPlan`] without touching the store.
pub fn plan_ingest(root: &Path, opts: &IngestOptions) -> Result<IngestPlan, IngestError> {
    if opts.dataset_name.trim().is_empty() || opts.category_name.trim().is_empty() {
        return Err(IngestError::InvalidOptions(
            "dataset and category names must be non-empty".into(),
        ));
    }
    let tree = crawler::crawl(root, opts.max_depth)?;
    let layout = crawler::detect_layout(&tree, opts.layout)?;
    let subject_dirs = crawler::subject_directories(&tree, &layout);
    let mut warnings = Vec::new();
    if tree.truncated {
        warnings.push(format!("crawl truncated at depth {}", opts.max_depth));
    }

    let clinical_root = tree
        .root
        .child(&layout.clinical_dir)
        .ok_or(CrawlError::MissingClinicalDir)?;
    let mut dirs = Vec::new();
    clinical_dirs(clinical_root, "", &mut dirs);

    let mut assessments = Vec::new();
    let mut orphan_rows = 0;
    let mut subjects: Vec<String> = Vec::new();
    let mut subject_index: HashMap<String, u32> = HashMap::new();
    for (rel, files) in &dirs {
        let dir_path = root.join(&layout.clinical_dir).join(rel);
        let display = |f: &str| {
            if rel.is_empty() {
                format!("{}/{f}", layout.clinical_dir)
            } else {
                format!("{}/{rel}/{f}", layout.clinical_dir)
            }
        };

        let mut variables: Vec<DictionaryEntry> = Vec::new();
        for f in files.iter().filter(|f| is_dictionary_file(f)) {
            let entries =
                parse_dictionary(&read(&dir_path.join(f))?).map_err(|e| e.in_file(&display(f)))?;
            for e in entries {
                if variables.iter().any(|v| v.name == e.name) {
                    return Err(IngestError::DuplicateVariable(e.name).in_file(&display(f)));
                }
                variables.push(e);
            }
        }

        let mut var_index: HashMap<String, u32> = variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name.clone(), i as u32))
            .collect();
        let mut extras: Vec<String> = Vec::new();
        let mut warned: HashSet<String> = HashSet::new();
        let mut plan = AssessmentPlan {
            name: if rel.is_empty() {
                opts.dataset_name.clone()
            } else {
                rel.clone()
            },
            ..Default::default()
        };
        let mut row_seq = 0u32;
        for f in files.iter().filter(|f| !is_dictionary_file(f)) {
            let bytes = read(&dir_path.join(f))?;
            let mut columns: Vec<u32> = Vec::new();
            let mut intern_var = |name: &str| -> u32 {
                let next = (variables.len() + extras.len()) as u32;
                *var_index.entry(name.to_string()).or_insert_with(|| {
                    extras.push(name.to_string());
                    next
                })
            };
            let header = read_clinical_csv(&bytes, &variables, opts.csv, |h, subject, cells| {
                if columns.is_empty() {
                    columns = h.variables.iter().map(|v| intern_var(v)).collect();
                }
                let sid = match subject_index.get(subject) {
                    Some(&id) => id,
                    None => {
                        let id = subjects.len() as u32;
                        subjects.push(subject.to_string());
                        subject_index.insert(subject.to_string(), id);
                        id
                    }
                };
                for (col, raw) in cells {
                    plan.push(sid, columns[*col], row_seq, raw);
                }
                row_seq += 1;
            })
            .map_err(|e| e.in_file(&display(f)))?;
            for s in &header.skipped {
                warnings.push(format!(
                    "{}:{}: {}; row skipped",
                    display(f),
                    s.line,
                    s.reason
                ));
            }
            orphan_rows += header.skipped.len();
            for extra in &header.extra_variables {
                intern_var(extra);
                if warned.insert(extra.clone()) {
                    warnings.push(format!(
                        "{}: column `{extra}` is not in the data dictionary; indexed without description",
                        display(f)
                    ));
                }
            }
        }
        for (offset, name) in extras.into_iter().enumerate() {
            let idx = (variables.len() + offset) as u32;
            let kind = infer_kind(
                plan.values
                    .iter()
                    .filter(|v| v.variable == idx)
                    .map(|v| plan.raw(v)),
            );
            variables.push(DictionaryEntry {
                value_kind: kind,
                name,
                description: String::new(),
                comments: String::new(),
                codes: Vec::new(),
            });
        }
        plan.variables = variables;
        plan.number_occurrences();
        assessments.push(plan);
    }
    if assessments.is_empty() {
        assessments.push(AssessmentPlan {
            name: opts.dataset_name.clone(),
            ..Default::default()
        });
    }

    let sample: Vec<&str> = subject_dirs
        .iter()
        .flat_map(|d| d.file_names.iter().map(String::as_str))
        .take(CONVENTION_SAMPLE)
        .collect();
    let (convention, linkage) = if sample.is_empty() {
        (None, Linkage::default())
    } else {
        let convention =
            detect_convention(&sample, &opts.registry, opts.strict_convention)?.clone();
        let images_lfn = format!("{}/{}", opts.root_lfn(), layout.images_dir);
        let known: HashSet<&str> = subjects.iter().map(String::as_str).collect();
        let linkage = link_images(&subject_dirs, &known, &convention, &images_lfn)?;
        (Some(convention), linkage)
    };
    for f in &linkage.skipped_files {
        warnings.push(format!(
            "{}/{f}: not a recognised scan file; skipped",
            layout.images_dir
        ));
    }
    let orphans = linkage.orphan_count();
    if orphans > 0 {
        warnings.push(format!("{orphans} image(s) have no clinical row"));
    }

    Ok(IngestPlan {
        layout,
        convention,
        assessments,
        subjects,
        linkage,
        orphan_rows,
        warnings,
    })
}

/// Crawl, parse, link and commit a dataset. All-or-nothing.
pub fn ingest_dataset(
    store: &Store,
    root: &Path,
    opts: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let plan = plan_ingest(root, opts)?;
    let mut conn = store.try_writer()?;
    let report = commit_plan(&mut conn, &plan, opts)?;
    drop(conn);
    store.bump_generation();
    tracing::info!(
        dataset = %report.dataset_name,
        images = report.images_indexed,
        values = report.values_indexed,
        "dataset ingested"
    );
    Ok(report)
}

fn commit_plan(
    conn: &mut rusqlite::Connection,
    plan: &IngestPlan,
    opts: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let tx = conn.transaction()?;
    let now = now_timestamp();

    tx.execute(
        "INSERT OR IGNORE INTO dataset_category (name) VALUES (?1)",
        [&opts.category_name],
    )?;
    let category_id: i64 = tx.query_row(
        "SELECT id FROM dataset_category WHERE name = ?1",
        [&opts.category_name],
        |r| r.get(0),
    )?;
    let existing: Option<i64> = tx
        .query_row(
            "SELECT id FROM dataset WHERE category_id = ?1 AND name = ?2",
            params![category_id, opts.dataset_name],
            |r| r.get(0),
        )
        .optional()?;
    if let Some(id) = existing {
        if !opts.replace {
            return Err(IngestError::DuplicateDataset {
                category: opts.category_name.clone(),
                name: opts.dataset_name.clone(),
            });
        }
        delete_dataset(&tx, id)?;
    }

    tx.execute(
        "INSERT INTO dataset (category_id, name, root_lfn, owner, created_on) VALUES (?1, ?2, ?3, ?4, ?5)",
        params![category_id, opts.dataset_name, opts.root_lfn(), opts.owner, now],
    )?;
    let dataset_id = tx.last_insert_rowid();

    // Row ids follow subject code order.
    let mut subject_ids = vec![0i64; plan.subjects.len()];
    {
        let mut order: Vec<usize> = (0..plan.subjects.len()).collect();
        order.sort_by(|a, b| plan.subjects[*a].cmp(&plan.subjects[*b]));
        let mut ins =
            tx.prepare_cached("INSERT INTO subject (dataset_id, subject_code) VALUES (?1, ?2)")?;
        for i in order {
            ins.execute(params![dataset_id, plan.subjects[i]])?;
            subject_ids[i] = tx.last_insert_rowid();
        }
    }

    let mut values_indexed = 0;
    let mut variables_indexed = 0;
    for a in &plan.assessments {
        tx.execute(
            "INSERT INTO assessment_type (dataset_id, name) VALUES (?1, ?2)",
            params![dataset_id, a.name],
        )?;
        let assessment_id = tx.last_insert_rowid();
        let mut var_ids = Vec::with_capacity(a.variables.len());
        {
            let mut ins_var = tx.prepare_cached(
                "INSERT INTO clinical_variable (assessment_type_id, name, value_kind, description, comments) \
                 VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            let mut ins_code = tx.prepare_cached(
                "INSERT INTO score_code (variable_id, code, label) VALUES (?1, ?2, ?3)",
            )?;
            for v in &a.variables {
                ins_var.execute(params![
                    assessment_id,
                    v.name,
                    v.value_kind.as_str(),
                    v.description,
                    v.comments
                ])?;
                let vid = tx.last_insert_rowid();
                for (code, label) in &v.codes {
                    ins_code.execute(params![vid, code, label])?;
                }
                var_ids.push((vid, v.value_kind));
                variables_indexed += 1;
            }
        }
        let mut ins_val = tx.prepare_cached(
            "INSERT INTO assessment_value (subject_id, variable_id, occurrence, value, num_value) \
             VALUES (?1, ?2, ?3, ?4, ?5)",
        )?;
        for v in &a.values {
            let (vid, kind) = var_ids[v.variable as usize];
            let raw = a.raw(v);
            ins_val.execute(params![
                subject_ids[v.subject as usize],
                vid,
                v.occurrence,
                raw,
                sort_key(kind, raw)
            ])?;
            values_indexed += 1;
        }
    }

    let by_code: HashMap<&str, i64> = plan
        .subjects
        .iter()
        .map(String::as_str)
        .zip(subject_ids.iter().copied())
        .collect();
    {
        let mut ins = tx.prepare_cached(
            "INSERT INTO imagefile (dataset_id, subject_id, subject_dir, file_name, lfn, file_type, \
             description, added_on, kind, project, token_dataset, subject_code, timepoint, \
             field_strength, modality, state, version) \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, '', ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16)",
        )?;
        for img in &plan.linkage.images {
            let subject_id = by_code.get(img.subject_code.as_str()).copied();
            let t = &img.tokens;
            ins.execute(params![
                dataset_id,
                subject_id,
                img.subject_dir,
                img.file_name,
                img.lfn,
                img.file_type,
                now,
                img.kind.as_str(),
                t.project,
                t.dataset,
                t.subject_code,
                t.timepoint,
                t.field_strength,
                t.modality,
                t.state.as_str(),
                t.version,
            ])?;
        }
    }
    tx.commit()?;

    Ok(IngestReport {
        dataset_id,
        dataset_name: opts.dataset_name.clone(),
        convention: plan.convention.as_ref().map(|c| c.name.clone()),
        sub_levels: plan.layout.sub_levels,
        subjects_indexed: plan.subjects.len(),
        images_indexed: plan.linkage.images.len(),
        values_indexed,
        variables_indexed,
        orphan_images: plan.linkage.orphan_count(),
        orphan_rows: plan.orphan_rows,
        skipped_files: plan.linkage.skipped_files.len(),
        warnings: plan.warnings.clone(),
    })
}

fn delete_dataset(tx: &Transaction<'_>, dataset_id: i64) -> rusqlite::Result<()> {
    tx.execute_batch(&format!(
        "DELETE FROM assessment_value WHERE subject_id IN (SELECT id FROM subject WHERE dataset_id = {dataset_id});
         DELETE FROM score_code WHERE variable_id IN (
             SELECT v.id FROM clinical_variable v JOIN assessment_type a ON a.id = v.assessment_type_id
             WHERE a.dataset_id = {dataset_id});
         DELETE FROM clinical_variable WHERE assessment_type_id IN (
             SELECT id FROM assessment_type WHERE dataset_id = {dataset_id});
         DELETE FROM assessment_type WHERE dataset_id = {dataset_id};
         DELETE FROM imagefile WHERE dataset_id = {dataset_id};
         DELETE FROM subject WHERE dataset_id = {dataset_id};
         DELETE FROM dataset WHERE id = {dataset_id};"
    ))
}

/// Map an lfn under `root_lfn` back to a path below the local dataset root.
///
/// Stands in for a replica catalog: only lfns rooted at this dataset resolve.
pub fn resolve_lfn(lfn: &str, root_lfn: &str, local_root: &Path) -> Option<PathBuf> {
    let rest = lfn.strip_prefix(root_lfn)?.strip_prefix('/')?;
    if rest
        .split('/')
        .any(|seg| seg.is_empty() || seg == "." || seg == "..")
    {
        return None;
    }
    Some(local_root.join(rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_file_names() {
        assert!(is_dictionary_file("NUSDAST_dictionary.csv"));
        assert!(is_dictionary_file("asi_dict.csv"));
        assert!(is_dictionary_file("DataDictionary.CSV"));
        assert!(!is_dictionary_file("clinical.csv"));
    }

    #[test]
    fn lfn_resolution_stays_inside_root() {
        let root = Path::new("/fixtures/nusdast");
        assert_eq!(
            resolve_lfn("/grid/d/NUSDAST/IMAGES/s/f.nii", "/grid/d/NUSDAST", root),
            Some(root.join("IMAGES/s/f.nii"))
        );
        assert_eq!(
            resolve_lfn("/grid/d/NUSDAST/../x", "/grid/d/NUSDAST", root),
            None
        );
        assert_eq!(
            resolve_lfn("/grid/d/OTHER/IMAGES/f", "/grid/d/NUSDAST", root),
            None
        );
    }

    #[test]
    fn empty_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = plan_ingest(dir.path(), &IngestOptions::new("", "C")).unwrap_err();
        assert!(matches!(err, IngestError::InvalidOptions(_)));
    }

    #[test]
    fn repeated_rows_number_occurrences() {
        let dir = tempfile::tempdir().unwrap();
        let clinical = dir.path().join("CLINICAL_VARIABLES");
        std::fs::create_dir_all(&clinical).unwrap();
        std::fs::create_dir_all(dir.path().join("IMAGES")).unwrap();
        std::fs::write(
            clinical.join("dictionary.csv"),
            "name,kind\nscore,numeric\n",
        )
        .unwrap();
        std::fs::write(
            clinical.join("visits.csv"),
            "subject_id,score,site\nS2,3,a\nS1,1,\nS2,4,b\nS1,,c\n",
        )
        .unwrap();
        let plan = plan_ingest(dir.path(), &IngestOptions::new("D", "C")).unwrap();
        assert_eq!(plan.subjects, ["S2", "S1"]);
        let a = &plan.assessments[0];
        let names: Vec<&str> = a.variables.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["score", "site"]);
        assert_eq!(a.variables[1].value_kind, crate::model::ValueKind::Text);
        let got: Vec<(&str, &str, u32, &str)> = a
            .values
            .iter()
            .map(|v| {
                (
                    plan.subjects[v.subject as usize].as_str(),
                    names[v.variable as usize],
                    v.occurrence,
                    a.raw(v),
                )
            })
            .collect();
        assert_eq!(
            got,
            [
                ("S2", "score", 0, "3"),
                ("S2", "score", 1, "4"),
                ("S2", "site", 0, "a"),
                ("S2", "site", 1, "b"),
                ("S1", "score", 0, "1"),
                ("S1", "site", 0, "c"),
            ]
        );
        assert_eq!(
            plan.warnings
                .iter()
                .filter(|w| w.contains("`site`"))
                .count(),
            1
        );
    }
}
