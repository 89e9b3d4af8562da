//! Clinical data CSV parsing: one row per subject assessment.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::dictionary::DictionaryEntry;
use super::IngestError;

/// Header names accepted for the subject identifier column.
pub const SUBJECT_COLUMNS: &[&str] = &[
    "subject_code",
    "subject_id",
    "subject",
    "subjectid",
    "subject id",
    "participant_id",
    "id",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalRow {
    pub subject_code: String,
    /// Non-empty cells only, in column order.
    pub values: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalTable {
    /// Variable columns in header order.
    pub variables: Vec<String>,
    /// Variable columns that the dictionary does not describe.
    pub extra_variables: Vec<String>,
    pub rows: Vec<ClinicalRow>,
    pub skipped: Vec<SkippedRow>,
}

impl ClinicalTable {
    pub fn value_count(&self) -> usize {
        self.rows.iter().map(|r| r.values.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Accept rows whose cell count differs from the header.
    pub allow_ragged: bool,
}

/// Header facts of a clinical CSV, returned once all rows have been read.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClinicalHeader {
    /// Variable columns in header order.
    pub variables: Vec<String>,
    /// Variable columns that the dictionary does not describe.
    pub extra_variables: Vec<String>,
    pub skipped: Vec<SkippedRow>,
}

/// Parse a clinical CSV into memory. Convenient for small files; ingest
/// streams through [`read_clinical_csv`] instead.
pub fn parse_clinical_csv(
    csv_bytes: &[u8],
    dictionary: &[DictionaryEntry],
    opts: CsvOptions,
) -> Result<ClinicalTable, IngestError> {
    let mut rows = Vec::new();
    let header = read_clinical_csv(csv_bytes, dictionary, opts, |_, subject, cells| {
        rows.push((
            subject.to_string(),
            cells
                .iter()
                .map(|(i, v)| (*i, v.to_string()))
                .collect::<Vec<_>>(),
        ));
    })?;
    let rows = rows
        .into_iter()
        .map(|(subject_code, cells)| ClinicalRow {
            subject_code,
            values: cells
                .into_iter()
                .map(|(i, v)| (header.variables[i].clone(), v))
                .collect(),
        })
        .collect();
    Ok(ClinicalTable {
        variables: header.variables,
        extra_variables: header.extra_variables,
        rows,
        skipped: header.skipped,
    })
}

/// Stream a clinical CSV. `on_row` receives the header read so far, the
/// subject code and the non-empty cells as (index into
/// [`ClinicalHeader::variables`], trimmed value).
pub fn read_clinical_csv(
    csv_bytes: &[u8],
    dictionary: &[DictionaryEntry],
    opts: CsvOptions,
    mut on_row: impl FnMut(&ClinicalHeader, &str, &[(usize, &str)]),
) -> Result<ClinicalHeader, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(csv_bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::MalformedCsv(e.to_string()))?
        .iter()
        .map(|h| h.trim().trim_start_matches('\u{feff}').trim().to_string())
        .collect();

    let subject_col = headers
        .iter()
        .position(|h| SUBJECT_COLUMNS.contains(&h.to_ascii_lowercase().as_str()))
        .ok_or(IngestError::MissingSubjectColumn)?;

    let mut seen = HashSet::new();
    for h in &headers {
        if h.is_empty() {
            return Err(IngestError::MalformedCsv("empty column header".into()));
        }
        if !seen.insert(h.as_str()) {
            return Err(IngestError::MalformedCsv(format!("duplicate column `{h}`")));
        }
    }

    let known: HashSet<&str> = dictionary.iter().map(|d| d.name.as_str()).collect();
    // Header position -> variable index.
    let var_of = |col: usize| if col < subject_col { col } else { col - 1 };
    let variables: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != subject_col)
        .map(|(_, h)| h.clone())
        .collect();
    let mut header = ClinicalHeader {
        extra_variables: variables
            .iter()
            .filter(|v| !known.contains(v.as_str()))
            .cloned()
            .collect(),
        variables,
        ..Default::default()
    };

    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(IngestError::MalformedCsv(e.to_string())),
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != headers.len() && !opts.allow_ragged {
            return Err(IngestError::RaggedRow {
                line,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let subject = record.get(subject_col).unwrap_or("").trim();
        if subject.is_empty() {
            header.skipped.push(SkippedRow {
                line,
                reason: "missing subject id".into(),
            });
            continue;
        }
        let cells: Vec<(usize, &str)> = record
            .iter()
            .take(headers.len())
            .enumerate()
            .filter(|(i, _)| *i != subject_col)
            .map(|(i, v)| (var_of(i), v.trim()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        on_row(&header, subject, &cells);
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ValueKind;

    fn dict(names: &[&str]) -> Vec<DictionaryEntry> {
        names
            .iter()
            .map(|n| DictionaryEntry {
                name: n.to_string(),
                description: String::new(),
                value_kind: ValueKind::Text,
                comments: String::new(),
                codes: vec![],
            })
            .collect()
    }

    #[test]
    fn missing_cells_emit_no_values() {
        let csv = b"subject_id,age,gender\nCC0001, 34 ,male\nCC0002,,female\n";
        let t = parse_clinical_csv(csv, &dict(&["age", "gender"]), CsvOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.value_count(), 3);
        assert_eq!(t.rows[0].values[0], ("age".to_string(), "34".to_string()));
        assert!(t.extra_variables.is_empty());
    }

    #[test]
    fn empty_subject_is_skipped() {
        let csv = b"subject_id,age\n,34\nCC0002,40\n";
        let t = parse_clinical_csv(csv, &[], CsvOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.skipped.len(), 1);
        assert_eq!(t.skipped[0].line, 2);
        assert_eq!(t.extra_variables, vec!["age".to_string()]);
    }

    #[test]
    fn ragged_rows_need_the_flag() {
        let csv = b"subject_id,a,b\nS1,1\nS2,1,2\n";
        assert!(matches!(
            parse_clinical_csv(csv, &[], CsvOptions::default()),
            Err(IngestError::RaggedRow {
                line: 2,
                expected: 3,
                found: 2
            })
        ));
        let t = parse_clinical_csv(csv, &[], CsvOptions { allow_ragged: true }).unwrap();
        assert_eq!(t.value_count(), 3);
    }

    #[test]
    fn requires_subject_column() {
        assert!(matches!(
            parse_clinical_csv(b"age,gender\n1,2\n", &[], CsvOptions::default()),
            Err(IngestError::MissingSubjectColumn)
        ));
    }

    #[test]
    fn empty_data_section() {
        let t = parse_clinical_csv(b"subject_id,age\n", &[], CsvOptions::default()).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.variables, vec!["age".to_string()]);
    }

    #[test]
    fn quoted_values_keep_commas() {
        let csv = b"Subject,notes\nS1,\"left, then right\"\n";
        let t = parse_clinical_csv(csv, &[], CsvOptions::default()).unwrap();
        assert_eq!(t.rows[0].values[0].1, "left, then right");
    }
}
