//! Scan filename conventions.
//!
//! A convention is an ordered list of `+`-separated tokens; the last token
//! carries the file extension (`...+V01.nii.bz2`). Parsing is strict on the
//! token count and on the state/version/timepoint shapes, and lenient on
//! everything else: modalities and field strengths are free text.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FileKind;

/// Fraction of sampled names (in tenths) that must parse for a convention to be detected.
const DETECTION_THRESHOLD_TENTHS: usize = 9;

const SUMMARY_EXTENSIONS: &[&str] = &["rec", "ifh"];
const IMAGE_EXTENSIONS: &[&str] = &[
    "nii", "img", "hdr", "mgz", "mgh", "mnc", "dcm", "dicom", "ima", "nrrd", "tar", "tgz", "zip",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NamingError {
    #[error("expected {expected} `{separator}`-separated tokens, found {found} in `{name}`")]
    TokenCountMismatch {
        name: String,
        separator: String,
        expected: usize,
        found: usize,
    },
    #[error("`{0}` is not a scan state (expected ORIG or PROC)")]
    UnknownStateToken(String),
    #[error("`{0}` is not a version token (expected V followed by digits)")]
    MalformedVersion(String),
    #[error("`{0}` is not a timepoint token (expected M followed by digits)")]
    MalformedTimepoint(String),
    #[error("empty {field} token in `{name}`")]
    EmptyToken { field: TokenField, name: String },
    #[error("`{0}` has no file extension")]
    MissingExtension(String),
    #[error("empty filename")]
    EmptyName,
    #[error("invalid convention `{name}`: {reason}")]
    InvalidConvention { name: String, reason: String },
    #[error("no registered convention parses at least 90% of the {sampled} sampled names")]
    NoMatchingConvention { sampled: usize },
    #[error("conventions {0:?} all parse at least 90% of the sample")]
    AmbiguousConvention(Vec<String>),
    #[error("cannot read convention registry: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenField {
    Project,
    Dataset,
    Subject,
    Timepoint,
    FieldStrength,
    Modality,
    State,
    Version,
}

impl TokenField {
    const MANDATORY: [TokenField; 7] = [
        TokenField::Project,
        TokenField::Dataset,
        TokenField::Subject,
        TokenField::FieldStrength,
        TokenField::Modality,
        TokenField::State,
        TokenField::Version,
    ];
}

impl fmt::Display for TokenField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TokenField::Project => "project",
            TokenField::Dataset => "dataset",
            TokenField::Subject => "subject",
            TokenField::Timepoint => "timepoint",
            TokenField::FieldStrength => "field_strength",
            TokenField::Modality => "modality",
            TokenField::State => "state",
            TokenField::Version => "version",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanState {
    #[serde(rename = "ORIG")]
    Orig,
    #[serde(rename = "PROC")]
    Proc,
}

impl ScanState {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanState::Orig => "ORIG",
            ScanState::Proc => "PROC",
        }
    }
}

impl FromStr for ScanState {
    type Err = NamingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ORIG" => Ok(ScanState::Orig),
            "PROC" => Ok(ScanState::Proc),
            other => Err(NamingError::UnknownStateToken(other.to_string())),
        }
    }
}

/// Structured view of a scan filename.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanNameTokens {
    pub project: String,
    pub dataset: String,
    pub subject_code: String,
    pub timepoint: Option<String>,
    pub field_strength: String,
    pub modality: String,
    pub state: ScanState,
    pub version: String,
    /// Everything from the first dot of the final token, e.g. `.nii.bz2`.
    pub extension: String,
}

impl ScanNameTokens {
    fn field(&self, field: TokenField) -> &str {
        match field {
            TokenField::Project => &self.project,
            TokenField::Dataset => &self.dataset,
            TokenField::Subject => &self.subject_code,
            TokenField::Timepoint => self.timepoint.as_deref().unwrap_or(""),
            TokenField::FieldStrength => &self.field_strength,
            TokenField::Modality => &self.modality,
            TokenField::State => self.state.as_str(),
            TokenField::Version => &self.version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConventionSpec {
    pub name: String,
    pub token_order: Vec<TokenField>,
    #[serde(default = "default_separator")]
    pub separator: String,
    pub timepoint_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_modalities: Option<Vec<String>>,
}

fn default_separator() -> String {
    "+".to_string()
}

impl ConventionSpec {
    /// `nG+NUSDAST+CC0196+M0+1T5+MPR1+ORIG+V01.nii.bz2`
    pub fn nusdast() -> Self {
        ConventionSpec {
            name: "NUSDAST".into(),
            token_order: vec![
                TokenField::Project,
                TokenField::Dataset,
                TokenField::Subject,
                TokenField::Timepoint,
                TokenField::FieldStrength,
                TokenField::Modality,
                TokenField::State,
                TokenField::Version,
            ],
            separator: default_separator(),
            timepoint_present: true,
            known_modalities: Some(
                ["3DSF", "FLSH", "MPR1", "MPR2", "MPR3", "MPR4", "MPRA"]
                    .map(String::from)
                    .to_vec(),
            ),
        }
    }

    /// `nG+FBIRN1+000900000106+1T5+BH1+ORIG+V02.tar.bz2`
    pub fn fbirn() -> Self {
        ConventionSpec {
            name: "FBIRN".into(),
            token_order: vec![
                TokenField::Project,
                TokenField::Dataset,
                TokenField::Subject,
                TokenField::FieldStrength,
                TokenField::Modality,
                TokenField::State,
                TokenField::Version,
            ],
            separator: default_separator(),
            timepoint_present: false,
            known_modalities: Some(
                [
                    "BH1", "BH2", "MMN1", "MMN2", "MPR", "R1", "R2", "SIRP", "SM1", "SM2", "SM3",
                    "SM4", "T2",
                ]
                .map(String::from)
                .to_vec(),
            ),
        }
    }

    pub fn validate(&self) -> Result<(), NamingError> {
        let invalid = |reason: String| NamingError::InvalidConvention {
            name: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(invalid("empty name".into()));
        }
        if self.separator.is_empty() || self.separator.contains('.') {
            return Err(invalid(
                "separator must be non-empty and must not contain `.`".into(),
            ));
        }
        for field in TokenField::MANDATORY {
            let n = self.token_order.iter().filter(|f| **f == field).count();
            if n != 1 {
                return Err(invalid(format!("token `{field}` appears {n} times")));
            }
        }
        let timepoints = self
            .token_order
            .iter()
            .filter(|f| **f == TokenField::Timepoint)
            .count();
        match (self.timepoint_present, timepoints) {
            (true, 1) | (false, 0) => Ok(()),
            _ => Err(invalid(format!(
                "timepoint_present={} but token order lists {timepoints} timepoint tokens",
                self.timepoint_present
            ))),
        }
    }

    /// Render tokens back into a filename. Inverse of [`parse_scan_filename`].
    pub fn render(&self, tokens: &ScanNameTokens) -> String {
        let mut out = self
            .token_order
            .iter()
            .map(|f| tokens.field(*f))
            .collect::<Vec<_>>()
            .join(&self.separator);
        out.push_str(&tokens.extension);
        out
    }
}

/// Built-in conventions in detection priority order.
pub fn builtin_registry() -> Vec<ConventionSpec> {
    vec![ConventionSpec::nusdast(), ConventionSpec::fbirn()]
}

/// Load a registry from a JSON file holding an array of convention records.
pub fn load_registry(path: &Path) -> Result<Vec<ConventionSpec>, NamingError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NamingError::Registry(format!("{}: {e}", path.display())))?;
    let registry: Vec<ConventionSpec> =
        serde_json::from_str(&text).map_err(|e| NamingError::Registry(e.to_string()))?;
    if registry.is_empty() {
        return Err(NamingError::Registry("registry is empty".into()));
    }
    for c in &registry {
        c.validate()?;
    }
    Ok(registry)
}

pub fn parse_scan_filename(
    name: &str,
    convention: &ConventionSpec,
) -> Result<ScanNameTokens, NamingError> {
    if name.is_empty() {
        return Err(NamingError::EmptyName);
    }
    let parts: Vec<&str> = name.split(convention.separator.as_str()).collect();
    if parts.len() != convention.token_order.len() {
        return Err(NamingError::TokenCountMismatch {
            name: name.to_string(),
            separator: convention.separator.clone(),
            expected: convention.token_order.len(),
            found: parts.len(),
        });
    }

    let last = parts.len() - 1;
    let (tail, extension) = match parts[last].find('.') {
        Some(dot) => parts[last].split_at(dot),
        None => return Err(NamingError::MissingExtension(name.to_string())),
    };
    if extension.len() < 2 {
        return Err(NamingError::MissingExtension(name.to_string()));
    }

    let mut tokens = ScanNameTokens {
        project: String::new(),
        dataset: String::new(),
        subject_code: String::new(),
        timepoint: None,
        field_strength: String::new(),
        modality: String::new(),
        state: ScanState::Orig,
        version: String::new(),
        extension: extension.to_string(),
    };

    for (i, field) in convention.token_order.iter().enumerate() {
        let raw = if i == last { tail } else { parts[i] };
        if raw.is_empty() {
            return Err(NamingError::EmptyToken {
                field: *field,
                name: name.to_string(),
            });
        }
        match field {
            TokenField::Project => tokens.project = raw.to_string(),
            TokenField::Dataset => tokens.dataset = raw.to_string(),
            TokenField::Subject => tokens.subject_code = raw.to_string(),
            TokenField::Timepoint => {
                if !is_prefixed_number(raw, 'M') {
                    return Err(NamingError::MalformedTimepoint(raw.to_string()));
                }
                tokens.timepoint = Some(raw.to_string());
            }
            TokenField::FieldStrength => tokens.field_strength = raw.to_string(),
            TokenField::Modality => tokens.modality = raw.to_string(),
            TokenField::State => tokens.state = raw.parse()?,
            TokenField::Version => {
                if !is_prefixed_number(raw, 'V') {
                    return Err(NamingError::MalformedVersion(raw.to_string()));
                }
                tokens.version = raw.to_string();
            }
        }
    }
    Ok(tokens)
}

fn is_prefixed_number(token: &str, prefix: char) -> bool {
    token
        .strip_prefix(prefix)
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

/// Full extension of a filename starting at its first dot (`a.nii.bz2` -> `.nii.bz2`).
pub fn full_extension(name: &str) -> &str {
    // Skip a leading dot so hidden files keep their name.
    match name.get(1..).and_then(|rest| rest.find('.')) {
        Some(i) => &name[i + 1..],
        None => "",
    }
}

fn extension_parts(name: &str) -> impl Iterator<Item = String> + '_ {
    full_extension(name)
        .split('.')
        .filter(|s| !s.is_empty())
        .map(|s| s.to_ascii_lowercase())
}

pub fn is_summary_name(name: &str) -> bool {
    extension_parts(name)
        .last()
        .is_some_and(|e| SUMMARY_EXTENSIONS.contains(&e.as_str()))
}

fn is_image_extension(extension: &str) -> bool {
    extension
        .split('.')
        .find(|s| !s.is_empty())
        .is_some_and(|first| IMAGE_EXTENSIONS.contains(&first.to_ascii_lowercase().as_str()))
}

/// Classify a file as a scan, a scan summary (`.rec` / `.ifh`) or unknown.
pub fn classify_auxiliary(name: &str, registry: &[ConventionSpec]) -> FileKind {
    if is_summary_name(name) {
        return FileKind::Summary;
    }
    let parses = registry
        .iter()
        .filter_map(|c| parse_scan_filename(name, c).ok())
        .any(|t| is_image_extension(&t.extension));
    if parses {
        FileKind::Scan
    } else {
        FileKind::Unknown
    }
}

/// Pick the convention that parses at least 90% of `names`.
///
/// When several conventions pass, the earliest in `registry` wins unless
/// `strict` is set, in which case the tie is an error.
pub fn detect_convention<'r, S: AsRef<str>>(
    names: &[S],
    registry: &'r [ConventionSpec],
    strict: bool,
) -> Result<&'r ConventionSpec, NamingError> {
    let total = names.len();
    if total == 0 || registry.is_empty() {
        return Err(NamingError::NoMatchingConvention { sampled: total });
    }
    let passing: Vec<&ConventionSpec> = registry
        .iter()
        .filter(|c| {
            let parsed = names
                .iter()
                .filter(|n| parse_scan_filename(n.as_ref(), c).is_ok())
                .count();
            parsed * 10 >= total * DETECTION_THRESHOLD_TENTHS
        })
        .collect();
    match passing.as_slice() {
        [] => Err(NamingError::NoMatchingConvention { sampled: total }),
        [only] => Ok(only),
        [first, ..] if !strict => Ok(first),
        many => Err(NamingError::AmbiguousConvention(
            many.iter().map(|c| c.name.clone()).collect(),
        )),
    }
}
