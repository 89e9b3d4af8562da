//! Domain records of the analysis catalog.
//!
//! These mirror the relational tables created by [`crate::store`]. Ids are the
//! SQLite rowids of the corresponding tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::naming::ScanNameTokens;

pub type Id = i64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSetCategory {
    pub id: Id,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSet {
    pub id: Id,
    pub category_id: Id,
    pub name: String,
    pub root_lfn: String,
    pub owner: String,
    pub created_on: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub id: Id,
    pub dataset_id: Id,
    pub subject_code: String,
}

/// One indexed scan or summary file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFileRecord {
    pub id: Id,
    pub dataset_id: Id,
    /// `None` for images whose subject has no clinical row.
    pub subject_id: Option<Id>,
    /// Name of the directory the file was found in, e.g. `nG+NUSDAST+CC0196`.
    pub subject_dir: String,
    pub file_name: String,
    pub lfn: String,
    pub file_type: String,
    pub description: String,
    pub added_on: String,
    pub kind: FileKind,
    pub tokens: Option<ScanNameTokens>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentType {
    pub id: Id,
    pub dataset_id: Id,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Numeric,
    Text,
    Date,
}

impl ValueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Numeric => "numeric",
            ValueKind::Text => "text",
            ValueKind::Date => "date",
        }
    }

    /// Whether `<` and `>` are meaningful for values of this kind.
    pub fn is_ordered(self) -> bool {
        matches!(self, ValueKind::Numeric | ValueKind::Date)
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "numeric" | "number" | "integer" | "int" | "float" | "real" | "decimal" => {
                Ok(ValueKind::Numeric)
            }
            "text" | "string" | "categorical" | "char" | "varchar" => Ok(ValueKind::Text),
            "date" | "datetime" => Ok(ValueKind::Date),
            other => Err(format!("unknown value kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalVariable {
    pub id: Id,
    pub assessment_type_id: Id,
    pub name: String,
    pub value_kind: ValueKind,
    pub description: String,
    pub comments: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCode {
    pub id: Id,
    pub variable_id: Id,
    pub code: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentValue {
    pub id: Id,
    pub subject_id: Id,
    pub variable_id: Id,
    pub occurrence: u32,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDef {
    pub id: Id,
    pub name: String,
    pub lfn: String,
    pub version: String,
    pub description: String,
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmDef {
    pub id: Id,
    pub name: String,
    pub lfn: String,
    pub owner: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineAlgorithmLink {
    pub pipeline_id: Id,
    pub algorithm_id: Id,
    pub position: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub id: Id,
    pub login: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDef {
    pub id: Id,
    pub name: String,
}

/// Classification of a file found under a subject directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Scan,
    Summary,
    Unknown,
}

impl FileKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FileKind::Scan => "scan",
            FileKind::Summary => "summary",
            FileKind::Unknown => "unknown",
        }
    }
}

impl FromStr for FileKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scan" => Ok(FileKind::Scan),
            "summary" => Ok(FileKind::Summary),
            "unknown" => Ok(FileKind::Unknown),
            other => Err(format!("unknown file kind `{other}`")),
        }
    }
}
