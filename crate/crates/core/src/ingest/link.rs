//! Linking image files to clinical subjects.
//!
//! A file belongs to the subject named by its filename's subject token. The
//! enclosing directory must agree: its name either equals the subject code or
//! ends with `<separator><subject code>` (`nG+NUSDAST+CC0196` holds `CC0196`).

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::crawler::SubjectDirectory;
use crate::model::FileKind;
use crate::naming::{
    classify_auxiliary, full_extension, parse_scan_filename, ConventionSpec, ScanNameTokens,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedImage {
    pub lfn: String,
    pub file_name: String,
    pub file_type: String,
    pub subject_dir: String,
    pub subject_code: String,
    /// False when no clinical row carries `subject_code`.
    pub linked: bool,
    pub kind: FileKind,
    pub tokens: ScanNameTokens,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linkage {
    pub images: Vec<LinkedImage>,
    /// Files that could not be parsed or classified, as `dir/file` paths under the images root.
    pub skipped_files: Vec<String>,
}

impl Linkage {
    /// subject code -> lfns of its images, for linked images only.
    pub fn by_subject(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for img in self.images.iter().filter(|i| i.linked) {
            map.entry(img.subject_code.as_str())
                .or_default()
                .push(img.lfn.as_str());
        }
        map
    }

    pub fn orphan_count(&self) -> usize {
        self.images.iter().filter(|i| !i.linked).count()
    }
}

pub fn dir_matches_subject(dir_name: &str, subject_code: &str, separator: &str) -> bool {
    dir_name == subject_code
        || dir_name
            .strip_suffix(subject_code)
            .is_some_and(|head| head.ends_with(separator))
}

/// Resolve every file under the subject directories to a subject.
///
/// `images_lfn` is the lfn of the images root; file lfns are
/// `<images_lfn>/<intermediate>/<subject dir>/<file>`.
pub fn link_images(
    subject_dirs: &[SubjectDirectory],
    known: &HashSet<&str>,
    convention: &ConventionSpec,
    images_lfn: &str,
) -> Result<Linkage, IngestError> {
    let registry = std::slice::from_ref(convention);
    let mut linkage = Linkage::default();

    for dir in subject_dirs {
        let dir_rel = dir.rel_path();
        for file in &dir.file_names {
            let kind = classify_auxiliary(file, registry);
            let tokens = match parse_scan_filename(file, convention) {
                Ok(t) if kind != FileKind::Unknown => t,
                _ => {
                    linkage.skipped_files.push(format!("{dir_rel}/{file}"));
                    continue;
                }
            };
            if !dir_matches_subject(&dir.dir_name, &tokens.subject_code, &convention.separator) {
                return Err(IngestError::ConflictingSubject {
                    dir: dir.dir_name.clone(),
                    file: file.clone(),
                    token: tokens.subject_code.clone(),
                });
            }
            // Parsed extension and full extension agree unless earlier tokens contain dots.
            let file_type = if file.ends_with(&tokens.extension) {
                tokens.extension.clone()
            } else {
                full_extension(file).to_string()
            };
            linkage.images.push(LinkedImage {
                lfn: format!("{images_lfn}/{dir_rel}/{file}"),
                file_name: file.clone(),
                file_type,
                subject_dir: dir.dir_name.clone(),
                linked: known.contains(tokens.subject_code.as_str()),
                subject_code: tokens.subject_code.clone(),
                kind,
                tokens,
            });
        }
    }
    Ok(linkage)
}
