//! Deterministic synthetic dataset trees with a ground-truth manifest.
//!
//! A generated tree looks like a real dataset on disk:
//!
//! ```text
//! <outdir>/CLINICAL_VARIABLES/<dataset>_clinical.csv, <dataset>_dictionary.csv
//! <outdir>/CLINICAL_VARIABLES/<assessment>/...          (grouped variables)
//! <outdir>/IMAGES/[<level 1>/[<level 2>/]]<subject dir>/<scan files>
//! <outdir>/manifest.json
//! ```
//!
//! [`oracle_query`] evaluates filters by scanning the manifest in memory. It
//! shares no code with the SQL compiler so the two can check each other.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use chrono::NaiveDate;
use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ValueKind;
use crate::query::filter::{Combinator, FilterExpression, Operand, Operator, VariableRef};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLINICAL_DIR: &str = "CLINICAL_VARIABLES";
pub const IMAGES_DIR: &str = "IMAGES";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("output directory {0} is not empty")]
    OutdirNotEmpty(String),
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("type mismatch for `{variable}` with {op}: {reason}")]
    TypeMismatch {
        variable: String,
        op: String,
        reason: String,
    },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SynthConvention {
    Nusdast,
    Fbirn,
    /// NUSDAST-shaped names under an OASIS dataset token.
    Oasis,
}

impl SynthConvention {
    fn dataset_token(self) -> &'static str {
        match self {
            SynthConvention::Nusdast => "NUSDAST",
            SynthConvention::Fbirn => "FBIRN1",
            SynthConvention::Oasis => "OASIS",
        }
    }

    fn has_timepoint(self) -> bool {
        !matches!(self, SynthConvention::Fbirn)
    }

    fn modalities(self) -> &'static [&'static str] {
        match self {
            SynthConvention::Fbirn => &[
                "BH1", "BH2", "MMN1", "MMN2", "MPR", "R1", "R2", "SIRP", "SM1", "SM2", "T2",
            ],
            _ => &["3DSF", "FLSH", "MPR1", "MPR2", "MPR3", "MPR4", "MPRA"],
        }
    }

    fn subject_code(self, i: usize) -> String {
        match self {
            SynthConvention::Nusdast => format!("CC{:04}", i + 1),
            SynthConvention::Fbirn => format!("{:012}", 900_000_000 + i + 1),
            SynthConvention::Oasis => format!("OAS{:05}", i + 1),
        }
    }

    fn subject_dir(self, code: &str) -> String {
        match self {
            SynthConvention::Fbirn => format!("nG+{code}"),
            _ => format!("nG+{}+{code}", self.dataset_token()),
        }
    }

    fn level_name(self, level: usize, index: u32) -> String {
        match (self, level) {
            (SynthConvention::Fbirn, 0) => format!("phase{}", index + 1),
            (SynthConvention::Fbirn, _) => format!("CENTRE{:04}", index + 1),
            (SynthConvention::Oasis, 0) => format!("disc{}", index + 1),
            _ => format!("L{}_{:02}", level + 1, index + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSpec {
    pub code: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: ValueKind,
    #[serde(default)]
    pub description: String,
    /// Coded values; generated values are drawn from these codes.
    #[serde(default)]
    pub codes: Vec<CodeSpec>,
    /// Inclusive integer range for numeric values, or year range for dates.
    #[serde(default)]
    pub range: Option<[i64; 2]>,
    /// Candidate values for text variables.
    #[serde(default)]
    pub choices: Vec<String>,
    /// Sub-dataset directory; `None` puts the variable in the dataset-level CSV.
    #[serde(default)]
    pub assessment: Option<String>,
}

impl VariableSpec {
    pub fn coded(name: &str, codes: &[(&str, &str)]) -> Self {
        VariableSpec {
            name: name.into(),
            kind: ValueKind::Numeric,
            description: String::new(),
            codes: codes
                .iter()
                .map(|(c, l)| CodeSpec {
                    code: c.to_string(),
                    label: l.to_string(),
                })
                .collect(),
            range: None,
            choices: Vec::new(),
            assessment: None,
        }
    }

    pub fn numeric(name: &str, lo: i64, hi: i64) -> Self {
        VariableSpec {
            range: Some([lo, hi]),
            ..VariableSpec::coded(name, &[])
        }
    }

    pub fn date(name: &str, first_year: i64, last_year: i64) -> Self {
        VariableSpec {
            kind: ValueKind::Date,
            ..VariableSpec::numeric(name, first_year, last_year)
        }
    }

    pub fn text(name: &str, choices: &[&str]) -> Self {
        VariableSpec {
            kind: ValueKind::Text,
            choices: choices.iter().map(|c| c.to_string()).collect(),
            ..VariableSpec::coded(name, &[])
        }
    }

    pub fn in_assessment(mut self, assessment: &str) -> Self {
        self.assessment = Some(assessment.into());
        self
    }
}

pub const MARITAL_STATUS_CODES: [(&str, &str); 7] = [
    ("0", "Other"),
    ("1", "Single"),
    ("2", "Married/common law"),
    ("3", "Divorced"),
    ("4", "Separated"),
    ("5", "Widowed"),
    ("9", "Unknown"),
];

pub const EMPLOYMENT_STATUS_CODES: [(&str, &str); 7] = [
    ("0", "Other"),
    ("1", "Employed full-time"),
    ("2", "Employed part-time"),
    ("3", "Unemployed"),
    ("4", "Homemaker full-time"),
    ("5", "Student full-time"),
    ("6", "Student part-time"),
];

pub fn default_variables() -> Vec<VariableSpec> {
    vec![
        VariableSpec {
            description: "Marital Status".into(),
            ..VariableSpec::coded("maritalstatus", &MARITAL_STATUS_CODES)
        },
        VariableSpec {
            description: "Employment Status".into(),
            ..VariableSpec::coded("employmentstatus", &EMPLOYMENT_STATUS_CODES)
        },
        VariableSpec::text("gender", &["male", "female"]),
        VariableSpec::numeric("race", 1, 5),
    ]
}

fn default_files() -> [u32; 2] {
    [3, 33]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawSpec")]
pub struct SynthSpec {
    pub convention: SynthConvention,
    /// Dataset name used for the dataset-level CSVs; defaults to the convention's dataset token.
    #[serde(default)]
    pub dataset_name: Option<String>,
    /// Defaults to the convention's usual depth (1, 2 or 3).
    pub sub_levels: u8,
    /// Directory count per intermediate level (`sub_levels - 1` entries); missing entries default to 2.
    #[serde(default)]
    pub intermediate_fanout: Vec<u32>,
    pub n_subjects: u32,
    #[serde(default = "default_files")]
    pub files_per_subject: [u32; 2],
    /// Defaults to maritalstatus, employmentstatus, gender and race when absent.
    #[serde(default)]
    pub variables: Option<Vec<VariableSpec>>,
    #[serde(default)]
    pub missing_cell_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Wire form of [`SynthSpec`]; only `sub_levels` needs a convention-aware default.
#[derive(Deserialize)]
struct RawSpec {
    convention: SynthConvention,
    #[serde(default)]
    dataset_name: Option<String>,
    #[serde(default)]
    sub_levels: Option<u8>,
    #[serde(default)]
    intermediate_fanout: Vec<u32>,
    n_subjects: u32,
    #[serde(default = "default_files")]
    files_per_subject: [u32; 2],
    #[serde(default)]
    variables: Option<Vec<VariableSpec>>,
    #[serde(default)]
    missing_cell_rate: f64,
    #[serde(default)]
    seed: u64,
}

impl From<RawSpec> for SynthSpec {
    fn from(r: RawSpec) -> Self {
        let base = SynthSpec::new(r.convention, r.n_subjects, r.seed);
        SynthSpec {
            dataset_name: r.dataset_name,
            sub_levels: r.sub_levels.unwrap_or(base.sub_levels),
            intermediate_fanout: r.intermediate_fanout,
            files_per_subject: r.files_per_subject,
            variables: r.variables,
            missing_cell_rate: r.missing_cell_rate,
            ..base
        }
    }
}

impl SynthSpec {
    pub fn new(convention: SynthConvention, n_subjects: u32, seed: u64) -> Self {
        SynthSpec {
            convention,
            dataset_name: None,
            sub_levels: match convention {
                SynthConvention::Nusdast => 1,
                SynthConvention::Oasis => 2,
                SynthConvention::Fbirn => 3,
            },
            intermediate_fanout: Vec::new(),
            n_subjects,
            files_per_subject: default_files(),
            variables: None,
            missing_cell_rate: 0.0,
            seed,
        }
    }

    pub fn dataset_name(&self) -> String {
        self.dataset_name
            .clone()
            .unwrap_or_else(|| self.convention.dataset_token().to_string())
    }

    pub fn fanout(&self) -> Vec<u32> {
        let levels = usize::from(self.sub_levels.saturating_sub(1));
        (0..levels)
            .map(|i| self.intermediate_fanout.get(i).copied().unwrap_or(2))
            .collect()
    }

    /// Variables in effect, with OASIS defaults split over its two sub-datasets.
    pub fn effective_variables(&self) -> Vec<VariableSpec> {
        match &self.variables {
            Some(v) => v.clone(),
            None if self.convention == SynthConvention::Oasis => default_variables()
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    v.in_assessment(if i % 2 == 0 {
                        "OASIS-CrossSection"
                    } else {
                        "OASIS-Longitudinal"
                    })
                })
                .collect(),
            None => default_variables(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(1..=3).contains(&self.sub_levels) {
            return bad(format!(
                "sub_levels must be 1, 2 or 3, got {}",
                self.sub_levels
            ));
        }
        if self.intermediate_fanout.len() > usize::from(self.sub_levels - 1) {
            return bad("intermediate_fanout has more entries than intermediate levels".into());
        }
        if self.fanout().contains(&0) {
            return bad("intermediate_fanout entries must be positive".into());
        }
        let [lo, hi] = self.files_per_subject;
        if lo > hi {
            return bad(format!("files_per_subject range {lo}..{hi} is empty"));
        }
        if hi > 200 {
            return bad("files_per_subject is capped at 200".into());
        }
        if !(0.0..1.0).contains(&self.missing_cell_rate) {
            return bad("missing_cell_rate must be in [0, 1)".into());
        }
        let name = self.dataset_name();
        if name.is_empty() || name.contains(['/', '\\']) {
            return bad(format!(
                "dataset name `{name}` is not usable as a file name"
            ));
        }
        let vars = self.effective_variables();
        for (i, v) in vars.iter().enumerate() {
            if v.name.is_empty() || v.name.eq_ignore_ascii_case("subject_code") {
                return bad(format!("variable name `{}` is reserved or empty", v.name));
            }
            if vars[..i].iter().any(|w| w.name == v.name) {
                return bad(format!("variable `{}` is listed twice", v.name));
            }
            if v.codes.iter().any(|c| c.label.contains('\'')) {
                return bad(format!(
                    "code labels of `{}` may not contain quotes",
                    v.name
                ));
            }
            let has_source = match v.kind {
                ValueKind::Numeric => !v.codes.is_empty() || v.range.is_some_and(|[a, b]| a <= b),
                ValueKind::Date => v.range.is_some_and(|[a, b]| a <= b && a >= 1 && b <= 9999),
                ValueKind::Text => {
                    !v.codes.is_empty()
                        || (!v.choices.is_empty() && v.choices.iter().all(|c| !c.trim().is_empty()))
                }
            };
            if !has_source {
                return bad(format!("variable `{}` has no usable value source", v.name));
            }
            if v.kind == ValueKind::Numeric
                && v.codes.iter().any(|c| c.code.parse::<f64>().is_err())
            {
                return bad(format!(
                    "numeric variable `{}` has non-numeric codes",
                    v.name
                ));
            }
            if let Some(a) = &v.assessment {
                if a.is_empty() || a.contains(['/', '\\']) || a == "." || a == ".." {
                    return bad(format!("assessment name `{a}` is not a directory name"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    /// Path relative to the dataset root, e.g. `IMAGES/nG+NUSDAST+CC0001/<name>`.
    pub rel_path: String,
    pub summary: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub code: String,
    pub dir_name: String,
    /// Intermediate directories between IMAGES and the subject directory.
    pub intermediate_path: String,
    pub files: Vec<ManifestFile>,
    /// Non-empty clinical cells, by variable.
    pub values: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestVariable {
    pub name: String,
    pub kind: ValueKind,
    /// Sub-dataset name as ingest will report it.
    pub assessment: String,
    pub codes: Vec<CodeSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub subjects: usize,
    pub images: usize,
    pub summary_files: usize,
    pub non_empty_cells: usize,
    pub variables: usize,
    pub assessment_types: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub dataset_name: String,
    /// Name of the filename convention the tree follows.
    pub convention: String,
    pub variables: Vec<ManifestVariable>,
    pub subjects: Vec<ManifestSubject>,
    pub counts: ManifestCounts,
}

impl Manifest {
    /// Every file, as (subject, file), in generation order.
    pub fn files(&self) -> impl Iterator<Item = (&ManifestSubject, &ManifestFile)> {
        self.subjects
            .iter()
            .flat_map(|s| s.files.iter().map(move |f| (s, f)))
    }

    /// The lfn ingest assigns to `file` under a dataset root lfn.
    pub fn lfn(root_lfn: &str, file: &ManifestFile) -> String {
        format!("{}/{}", root_lfn.trim_end_matches('/'), file.rel_path)
    }

    pub fn variable(&self, name: &str) -> Option<&ManifestVariable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn generate_value(v: &VariableSpec, rng: &mut ChaCha8Rng) -> String {
    if !v.codes.is_empty() {
        return v.codes.choose(rng).unwrap().code.clone();
    }
    match v.kind {
        ValueKind::Numeric => {
            let [lo, hi] = v.range.unwrap();
            rng.random_range(lo..=hi).to_string()
        }
        ValueKind::Date => {
            let [lo, hi] = v.range.unwrap();
            let start = NaiveDate::from_ymd_opt(lo as i32, 1, 1).unwrap();
            let end = NaiveDate::from_ymd_opt(hi as i32, 12, 31).unwrap();
            let span = (end - start).num_days();
            let d = start + chrono::Duration::days(rng.random_range(0..=span));
            d.format("%Y-%m-%d").to_string()
        }
        ValueKind::Text => v.choices.choose(rng).unwrap().clone(),
    }
}

/// Scan file names for one subject: distinct token combinations, shuffled.
fn subject_files(
    conv: SynthConvention,
    code: &str,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, bool)> {
    let timepoints: &[&str] = if conv.has_timepoint() {
        &["M0", "M24", "M48"]
    } else {
        &[""]
    };
    let mut combos = Vec::new();
    for tp in timepoints {
        for modality in conv.modalities() {
            for state in ["ORIG", "PROC"] {
                for version in ["V01", "V02", "V03"] {
                    combos.push((*tp, *modality, state, version));
                }
            }
        }
    }
    combos.shuffle(rng);
    combos
        .into_iter()
        .take(count)
        .map(|(tp, modality, state, version)| {
            let strength = *["1T5", "3T"].choose(rng).unwrap();
            let (ext, summary) = match rng.random_range(0..10) {
                0 => (".ifh", true),
                1 => (".rec", true),
                2..=4 => (".tar.bz2", false),
                5 => (".img", false),
                _ => (".nii.bz2", false),
            };
            let mut parts = vec![
                "nG".to_string(),
                conv.dataset_token().to_string(),
                code.to_string(),
            ];
            if !tp.is_empty() {
                parts.push(tp.to_string());
            }
            parts.extend([
                strength.to_string(),
                modality.to_string(),
                state.to_string(),
                version.to_string(),
            ]);
            (format!("{}{ext}", parts.join("+")), summary)
        })
        .collect()
}

/// Build the manifest for `spec` without touching the filesystem.
pub fn plan(spec: &SynthSpec) -> Result<Manifest, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let conv = spec.convention;
    let dataset_name = spec.dataset_name();
    let vars = spec.effective_variables();

    let fanout = spec.fanout();
    let leaves: Vec<String> =
        fanout
            .iter()
            .enumerate()
            .fold(vec![String::new()], |acc, (level, &n)| {
                acc.iter()
                    .flat_map(|prefix| {
                        (0..n).map(move |i| {
                            let name = conv.level_name(level, i);
                            if prefix.is_empty() {
                                name
                            } else {
                                format!("{prefix}/{name}")
                            }
                        })
                    })
                    .collect()
            });

    let max_files = conv.modalities().len() * if conv.has_timepoint() { 3 } else { 1 } * 6;
    let [lo, hi] = spec.files_per_subject;
    let mut subjects = Vec::with_capacity(spec.n_subjects as usize);
    for i in 0..spec.n_subjects as usize {
        let code = conv.subject_code(i);
        let dir_name = conv.subject_dir(&code);
        let intermediate_path = leaves[i % leaves.len()].clone();
        let count = (rng.random_range(lo..=hi) as usize).min(max_files);
        let mut files: Vec<ManifestFile> = subject_files(conv, &code, count, &mut rng)
            .into_iter()
            .map(|(name, summary)| {
                let dir = if intermediate_path.is_empty() {
                    format!("{IMAGES_DIR}/{dir_name}")
                } else {
                    format!("{IMAGES_DIR}/{intermediate_path}/{dir_name}")
                };
                ManifestFile {
                    rel_path: format!("{dir}/{name}"),
                    name,
                    summary,
                }
            })
            .collect();
        files.sort_by(|a, b| a.name.cmp(&b.name));
        let mut values = BTreeMap::new();
        for v in &vars {
            let value = generate_value(v, &mut rng);
            if rng.random::<f64>() >= spec.missing_cell_rate {
                values.insert(v.name.clone(), value);
            }
        }
        subjects.push(ManifestSubject {
            code,
            dir_name,
            intermediate_path,
            files,
            values,
        });
    }

    let variables: Vec<ManifestVariable> = vars
        .iter()
        .map(|v| ManifestVariable {
            name: v.name.clone(),
            kind: v.kind,
            assessment: v.assessment.clone().unwrap_or_else(|| dataset_name.clone()),
            codes: v.codes.clone(),
        })
        .collect();
    let mut assessments: Vec<&str> = variables.iter().map(|v| v.assessment.as_str()).collect();
    assessments.sort_unstable();
    assessments.dedup();

    let counts = ManifestCounts {
        subjects: subjects.len(),
        images: subjects.iter().map(|s| s.files.len()).sum(),
        summary_files: subjects
            .iter()
            .flat_map(|s| &s.files)
            .filter(|f| f.summary)
            .count(),
        non_empty_cells: subjects.iter().map(|s| s.values.len()).sum(),
        variables: variables.len(),
        assessment_types: assessments.len().max(1),
    };
    Ok(Manifest {
        spec: spec.clone(),
        dataset_name,
        convention: match conv {
            SynthConvention::Fbirn => "FBIRN".into(),
            _ => "NUSDAST".into(),
        },
        variables,
        subjects,
        counts,
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn dictionary_csv(vars: &[&VariableSpec]) -> Result<Vec<u8>, SynthError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variable", "description", "type", "comments", "codes"])?;
    for v in vars {
        let codes = v
            .codes
            .iter()
            .map(|c| format!("{}='{}'", c.code, c.label))
            .collect::<Vec<_>>()
            .join(" ");
        w.write_record([
            v.name.as_str(),
            v.description.as_str(),
            v.kind.as_str(),
            "",
            codes.as_str(),
        ])?;
    }
    w.into_inner().map_err(|e| SynthError::Io {
        path: "dictionary".into(),
        source: e.into_error(),
    })
}

fn clinical_csv(
    vars: &[&VariableSpec],
    subjects: &[ManifestSubject],
) -> Result<Vec<u8>, SynthError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subject_code"];
    header.extend(vars.iter().map(|v| v.name.as_str()));
    w.write_record(&header)?;
    for s in subjects {
        let mut row = vec![s.code.as_str()];
        row.extend(
            vars.iter()
                .map(|v| s.values.get(&v.name).map_or("", String::as_str)),
        );
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| SynthError::Io {
        path: "clinical".into(),
        source: e.into_error(),
    })
}

/// Write the tree for `spec` under `outdir` (which must be empty or absent).
pub fn generate(spec: &SynthSpec, outdir: &Path) -> Result<Manifest, SynthError> {
    let manifest = plan(spec)?;
    if outdir.exists() {
        let mut entries = fs::read_dir(outdir).map_err(io_err(outdir))?;
        if entries.next().is_some() {
            return Err(SynthError::OutdirNotEmpty(outdir.display().to_string()));
        }
    }
    let images = outdir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for s in &manifest.subjects {
        let dir = images.join(&s.intermediate_path).join(&s.dir_name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for f in &s.files {
            write_file(
                &outdir.join(&f.rel_path),
                format!("synthetic {}\n", f.name).as_bytes(),
            )?;
        }
    }

    let vars = spec.effective_variables();
    let mut groups: IndexMap<Option<&str>, Vec<&VariableSpec>> = IndexMap::new();
    for v in &vars {
        groups.entry(v.assessment.as_deref()).or_default().push(v);
    }
    let clinical = outdir.join(CLINICAL_DIR);
    fs::create_dir_all(&clinical).map_err(io_err(&clinical))?;
    for (group, members) in &groups {
        let (dir, stem) = match group {
            Some(a) => (clinical.join(a), a.to_string()),
            None => (clinical.clone(), manifest.dataset_name.clone()),
        };
        write_file(
            &dir.join(format!("{stem}_dictionary.csv")),
            &dictionary_csv(members)?,
        )?;
        write_file(
            &dir.join(format!("{stem}_clinical.csv")),
            &clinical_csv(members, &manifest.subjects)?,
        )?;
    }

    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&outdir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

// ---- oracle ----

fn oracle_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|f| f.is_finite())
}

/// `(year, month, day)` of an ISO date, validated against the calendar.
fn oracle_date(s: &str) -> Option<(i32, u32, u32)> {
    let mut parts = s.trim().splitn(3, '-');
    let y: i32 = parts.next()?.parse().ok()?;
    let m: u32 = parts.next()?.parse().ok()?;
    let d: u32 = parts.next()?.parse().ok()?;
    NaiveDate::from_ymd_opt(y, m, d).map(|_| (y, m, d))
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
enum Key<'a> {
    Num(f64),
    Date((i32, u32, u32)),
    Text(&'a str),
}

fn key<'a>(kind: ValueKind, raw: &'a str) -> Option<Key<'a>> {
    match kind {
        ValueKind::Numeric => oracle_number(raw).map(Key::Num),
        ValueKind::Date => oracle_date(raw).map(Key::Date),
        ValueKind::Text => Some(Key::Text(raw)),
    }
}

/// Lfn-relative paths (`IMAGES/...`) of the images a filter should return, sorted.
pub fn oracle_query(
    manifest: &Manifest,
    filter: &FilterExpression,
) -> Result<Vec<String>, SynthError> {
    struct Prepared<'a> {
        var: &'a ManifestVariable,
        op: Operator,
        operands: Vec<&'a str>,
        keys: Vec<Key<'a>>,
        or: bool,
    }
    let mut prepared = Vec::new();
    for (i, p) in filter.predicates.iter().enumerate() {
        let name = match &p.variable {
            VariableRef::Name(n) => n.clone(),
            VariableRef::Id(id) => return Err(SynthError::UnknownVariable(format!("#{id}"))),
        };
        let var = manifest
            .variable(&name)
            .ok_or(SynthError::UnknownVariable(name))?;
        let operands: Vec<&str> = match &p.operand {
            Operand::Text(s) => vec![s.as_str()],
            Operand::List(v) => v.iter().map(String::as_str).collect(),
        };
        let mismatch = |reason: String| SynthError::TypeMismatch {
            variable: var.name.clone(),
            op: p.op.to_string(),
            reason,
        };
        match p.op {
            Operator::NotIn if operands.is_empty() => {
                return Err(SynthError::InvalidFilter(
                    "NOT_IN needs at least one operand".into(),
                ))
            }
            Operator::NotIn => {}
            _ if operands.len() != 1 => {
                return Err(SynthError::InvalidFilter(format!(
                    "{} takes a single operand",
                    p.op
                )))
            }
            _ => {}
        }
        if matches!(p.op, Operator::Lt | Operator::Gt) && var.kind == ValueKind::Text {
            return Err(mismatch("text variables are unordered".into()));
        }
        let keys = if matches!(
            p.op,
            Operator::Eq | Operator::Neq | Operator::NotIn | Operator::Lt | Operator::Gt
        ) {
            operands
                .iter()
                .map(|o| key(var.kind, o).ok_or_else(|| mismatch(format!("bad operand `{o}`"))))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        prepared.push(Prepared {
            var,
            op: p.op,
            operands,
            keys,
            or: i > 0 && p.combinator == Combinator::Or,
        });
    }

    let matches = |s: &ManifestSubject, p: &Prepared| -> bool {
        let Some(raw) = s.values.get(&p.var.name) else {
            return false;
        };
        match p.op {
            Operator::Like => raw
                .to_ascii_lowercase()
                .contains(&p.operands[0].to_ascii_lowercase()),
            Operator::Exact => raw == p.operands[0],
            _ => {
                let Some(v) = key(p.var.kind, raw) else {
                    return false;
                };
                match p.op {
                    Operator::Eq => v == p.keys[0],
                    Operator::Neq => v != p.keys[0],
                    Operator::Lt => v < p.keys[0],
                    Operator::Gt => v > p.keys[0],
                    Operator::NotIn => p.keys.iter().all(|k| v != *k),
                    Operator::Like | Operator::Exact => unreachable!(),
                }
            }
        }
    };

    let mut out = Vec::new();
    for s in &manifest.subjects {
        // OR of AND-groups.
        let mut any = false;
        let mut group = true;
        for p in &prepared {
            if p.or {
                any |= group;
                group = true;
            }
            group &= matches(s, p);
        }
        any |= group;
        if any {
            out.extend(s.files.iter().map(|f| f.rel_path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// A random filter over the manifest's variables, for oracle comparisons.
///
/// Operands are mostly values that occur in the data, sometimes nearby
/// values, and occasionally ill-typed so error handling is exercised too.
pub fn random_filter(
    manifest: &Manifest,
    dataset_id: crate::model::Id,
    rng: &mut impl Rng,
) -> FilterExpression {
    let mut f = FilterExpression::new(dataset_id);
    if manifest.variables.is_empty() {
        return f;
    }
    let n = rng.random_range(0..=4);
    for _ in 0..n {
        let var = manifest.variables.choose(rng).unwrap();
        let observed: Vec<&str> = manifest
            .subjects
            .iter()
            .filter_map(|s| s.values.get(&var.name).map(String::as_str))
            .collect();
        let mut op = *Operator::ALL.choose(rng).unwrap();
        if var.kind == ValueKind::Text
            && matches!(op, Operator::Lt | Operator::Gt)
            && rng.random_bool(0.8)
        {
            op = Operator::Eq;
        }
        let operand_value = |rng: &mut _| -> String { sample_operand(var, &observed, op, rng) };
        let operand = if op == Operator::NotIn {
            let k = rng.random_range(1..=3);
            Operand::List((0..k).map(|_| operand_value(rng)).collect())
        } else {
            Operand::Text(operand_value(rng))
        };
        f.predicates.push(crate::query::filter::Predicate {
            variable: VariableRef::Name(var.name.clone()),
            op,
            operand,
            combinator: if rng.random_bool(0.3) {
                Combinator::Or
            } else {
                Combinator::And
            },
        });
    }
    f
}

fn sample_operand(
    var: &ManifestVariable,
    observed: &[&str],
    op: Operator,
    rng: &mut impl Rng,
) -> String {
    let seen = observed.choose(rng).map(|s| s.to_string());
    let roll = rng.random_range(0..100);
    if roll < 3 && var.kind != ValueKind::Text {
        return "not-a-value".into();
    }
    if op == Operator::Like {
        let base = seen.unwrap_or_else(|| "a".into());
        let chars: Vec<char> = base.chars().collect();
        let start = rng.random_range(0..=chars.len());
        let end = rng.random_range(start..=chars.len());
        let piece: String = chars[start..end].iter().collect();
        return if rng.random_bool(0.5) {
            piece.to_ascii_uppercase()
        } else {
            piece
        };
    }
    match (roll, seen) {
        (3..=69, Some(v)) => v,
        _ => match var.kind {
            ValueKind::Numeric => {
                let x = rng.random_range(-2..=12);
                if rng.random_bool(0.2) {
                    format!("{x}.0")
                } else {
                    x.to_string()
                }
            }
            ValueKind::Date => format!(
                "{:04}-{:02}-{:02}",
                rng.random_range(1940..=2010),
                rng.random_range(1..=12),
                rng.random_range(1..=28)
            ),
            ValueKind::Text => {
                let v = var
                    .codes
                    .choose(rng)
                    .map(|c| c.code.clone())
                    .unwrap_or_else(|| "zzz".into());
                if rng.random_bool(0.3) {
                    v.to_ascii_uppercase()
                } else {
                    v
                }
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::filter::Predicate;

    #[test]
    fn planning_is_deterministic() {
        let spec = SynthSpec::new(SynthConvention::Nusdast, 20, 7);
        assert_eq!(plan(&spec).unwrap(), plan(&spec).unwrap());
        let other = SynthSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            plan(&spec).unwrap().subjects,
            plan(&other).unwrap().subjects
        );
    }

    #[test]
    fn counts_are_sums() {
        let spec = SynthSpec {
            missing_cell_rate: 0.3,
            ..SynthSpec::new(SynthConvention::Fbirn, 12, 3)
        };
        let m = plan(&spec).unwrap();
        assert_eq!(m.counts.images, m.files().count());
        assert_eq!(
            m.counts.non_empty_cells,
            m.subjects.iter().map(|s| s.values.len()).sum::<usize>()
        );
        for s in &m.subjects {
            assert!((3..=33).contains(&s.files.len()));
            assert_eq!(s.intermediate_path.matches('/').count(), 1);
        }
    }

    #[test]
    fn coded_values_stay_in_dictionary() {
        let m = plan(&SynthSpec::new(SynthConvention::Nusdast, 50, 1)).unwrap();
        for v in m.variables.iter().filter(|v| !v.codes.is_empty()) {
            for s in &m.subjects {
                if let Some(x) = s.values.get(&v.name) {
                    assert!(v.codes.iter().any(|c| &c.code == x));
                }
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SynthSpec::new(SynthConvention::Nusdast, 1, 0);
        spec.sub_levels = 4;
        assert!(plan(&spec).is_err());
        spec.sub_levels = 1;
        spec.files_per_subject = [5, 2];
        assert!(plan(&spec).is_err());
        spec.files_per_subject = [1, 2];
        spec.missing_cell_rate = 1.0;
        assert!(plan(&spec).is_err());
    }

    #[test]
    fn oracle_semantics() {
        let spec = SynthSpec {
            variables: Some(vec![
                VariableSpec::numeric("age", 20, 30),
                VariableSpec::text("notes", &["Alpha", "beta"]),
            ]),
            missing_cell_rate: 0.2,
            ..SynthSpec::new(SynthConvention::Nusdast, 30, 5)
        };
        let m = plan(&spec).unwrap();
        let all = oracle_query(&m, &FilterExpression::new(1)).unwrap();
        assert_eq!(all.len(), m.counts.images);

        let eq = FilterExpression::new(1).with(Predicate::new("notes", Operator::Eq, "Alpha"));
        let neq = FilterExpression::new(1).with(Predicate::new("notes", Operator::Neq, "Alpha"));
        let a = oracle_query(&m, &eq).unwrap();
        let b = oracle_query(&m, &neq).unwrap();
        let missing: usize = m
            .subjects
            .iter()
            .filter(|s| !s.values.contains_key("notes"))
            .map(|s| s.files.len())
            .sum();
        assert_eq!(a.len() + b.len() + missing, all.len());

        let like = FilterExpression::new(1).with(Predicate::new("notes", Operator::Like, "ALP"));
        assert_eq!(oracle_query(&m, &like).unwrap(), a);

        let bad = FilterExpression::new(1).with(Predicate::new("notes", Operator::Gt, "a"));
        assert!(matches!(
            oracle_query(&m, &bad),
            Err(SynthError::TypeMismatch { .. })
        ));
        let unknown = FilterExpression::new(1).with(Predicate::new("nope", Operator::Eq, "1"));
        assert!(matches!(
            oracle_query(&m, &unknown),
            Err(SynthError::UnknownVariable(_))
        ));
    }

    #[test]
    fn oracle_dates_compare_as_calendar_days() {
        assert!(oracle_date("2001-02-30").is_none());
        assert!(key(ValueKind::Date, "1999-12-31") < key(ValueKind::Date, "2000-01-01"));
        assert!(key(ValueKind::Numeric, "9") < key(ValueKind::Numeric, "10"));
    }
}
