//! Data dictionary CSV parsing.
//!
//! Declared layout (header names are matched case-insensitively, extra
//! columns are ignored):
//!
//! | column        | aliases                    | required |
//! |---------------|----------------------------|----------|
//! | `variable`    | `variable_name`, `name`    | yes      |
//! | `description` | `desc`, `question`         | no       |
//! | `type`        | `value_kind`, `kind`       | no       |
//! | `comments`    | `comment`                  | no       |
//! | `codes`       | `coded_values`, `values`   | no       |
//!
//! Coded values use the `<code> ='<label>'` micro-syntax, repeated and
//! separated by whitespace. When there is no `codes` cell, a description made
//! up entirely of coded values is parsed as the code table.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::model::ValueKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub name: String,
    pub description: String,
    pub value_kind: ValueKind,
    pub comments: String,
    /// `(code, label)` pairs in file order.
    pub codes: Vec<(String, String)>,
}

fn code_group() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+)\s*=\s*'([^']*)'").unwrap())
}

/// Split `0 ='Other' 1 ='Single' 5='Widowed'` into code/label pairs.
///
/// Returns `None` unless the whole string consists of such groups.
pub fn parse_coded_values(text: &str) -> Option<Vec<(String, String)>> {
    let re = code_group();
    let mut pairs = Vec::new();
    let mut last = 0;
    for cap in re.captures_iter(text) {
        let m = cap.get(0).unwrap();
        if !text[last..m.start()].trim().is_empty() {
            return None;
        }
        pairs.push((cap[1].to_string(), cap[2].to_string()));
        last = m.end();
    }
    if pairs.is_empty() || !text[last..].trim().is_empty() {
        return None;
    }
    Some(pairs)
}

struct Columns {
    name: usize,
    description: Option<usize>,
    kind: Option<usize>,
    comments: Option<usize>,
    codes: Option<usize>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord) -> Result<Self, IngestError> {
        let find = |aliases: &[&str]| {
            headers.iter().position(|h| {
                let h = h.trim().trim_start_matches('\u{feff}').to_ascii_lowercase();
                aliases.contains(&h.as_str())
            })
        };
        Ok(Columns {
            name: find(&["variable", "variable_name", "name"]).ok_or_else(|| {
                IngestError::MalformedCsv("dictionary has no `variable` column".into())
            })?,
            description: find(&["description", "desc", "question"]),
            kind: find(&["type", "value_kind", "kind"]),
            comments: find(&["comments", "comment"]),
            codes: find(&["codes", "coded_values", "values"]),
        })
    }
}

pub fn parse_dictionary(csv_bytes: &[u8]) -> Result<Vec<DictionaryEntry>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(csv_bytes);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::MalformedCsv(e.to_string()))?
        .clone();
    let cols = Columns::locate(&headers)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError::MalformedCsv(e.to_string()))?;
        let cell = |i: Option<usize>| i.and_then(|i| record.get(i)).unwrap_or("");
        let name = cell(Some(cols.name)).trim().to_string();
        if name.is_empty() {
            if record.iter().all(|c| c.trim().is_empty()) {
                continue;
            }
            return Err(IngestError::MalformedCsv(format!(
                "dictionary row {} has an empty variable name",
                record.position().map_or(0, |p| p.line())
            )));
        }
        if !seen.insert(name.clone()) {
            return Err(IngestError::DuplicateVariable(name));
        }
        let description = cell(cols.description).to_string();
        let codes_cell = cell(cols.codes).trim();
        let codes = if !codes_cell.is_empty() {
            parse_coded_values(codes_cell).ok_or_else(|| {
                IngestError::MalformedCsv(format!("unparseable coded values for `{name}`"))
            })?
        } else {
            parse_coded_values(&description).unwrap_or_default()
        };
        let mut codes_seen = HashSet::new();
        if let Some((dup, _)) = codes.iter().find(|(c, _)| !codes_seen.insert(c.as_str())) {
            return Err(IngestError::MalformedCsv(format!(
                "code `{dup}` listed twice for `{name}`"
            )));
        }
        let kind_cell = cell(cols.kind).trim();
        let value_kind = if kind_cell.is_empty() {
            if !codes.is_empty() {
                ValueKind::Numeric
            } else {
                ValueKind::Text
            }
        } else {
            kind_cell.parse().map_err(IngestError::MalformedCsv)?
        };
        out.push(DictionaryEntry {
            name,
            description,
            value_kind,
            comments: cell(cols.comments).to_string(),
            codes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MARITAL: &str = "0 ='Other' 1 ='Single' 2 ='Married/common law' 3 ='Divorced' 4 ='Separated' 5='Widowed' 9='Unknown'";
    const EMPLOYMENT: &str = "0='Other' 1='Employed full-time' 2='Employed part-time' 3='Unemployed' 4='Homemaker full-time' 5='Student full-time' 6='Student part-time'";

    #[test]
    fn splits_marital_status_codes() {
        let csv = format!("variable,description,type,comments,codes\nmaritalstatus,Marital Status,,,\"{MARITAL}\"\n");
        let entries = parse_dictionary(csv.as_bytes()).unwrap();
        assert_eq!(entries.len(), 1);
        let e = &entries[0];
        assert_eq!(e.codes.len(), 7);
        assert!(e.codes.contains(&("2".into(), "Married/common law".into())));
        assert_eq!(
            e.codes.last().unwrap(),
            &("9".to_string(), "Unknown".to_string())
        );
        assert_eq!(e.value_kind, ValueKind::Numeric);
        assert_eq!(e.description, "Marital Status");
    }

    #[test]
    fn codes_embedded_in_description_are_found() {
        let csv = format!("variable,description\nemploymentstatus,\"{EMPLOYMENT}\"\n");
        let e = &parse_dictionary(csv.as_bytes()).unwrap()[0];
        assert_eq!(e.codes.len(), 7);
        assert_eq!(
            e.codes.iter().find(|(c, _)| c == "5").unwrap().1,
            "Student full-time"
        );
        assert_eq!(e.description, EMPLOYMENT);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(
            parse_dictionary(b"variable,description,type,comments,codes\n")
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn duplicate_variable_is_rejected() {
        let err = parse_dictionary(b"variable\nage\nage\n").unwrap_err();
        assert!(matches!(err, IngestError::DuplicateVariable(v) if v == "age"));
    }

    #[test]
    fn missing_variable_column_is_malformed() {
        assert!(matches!(
            parse_dictionary(b"foo,bar\n1,2\n"),
            Err(IngestError::MalformedCsv(_))
        ));
    }

    #[test]
    fn explicit_kinds_and_comments() {
        let csv = b"Variable,Question,Type,Comments\nage,Age at scan,numeric,years\ndob,Birth date,date,\nnotes,Free text,text,\n";
        let e = parse_dictionary(csv).unwrap();
        assert_eq!(e[0].value_kind, ValueKind::Numeric);
        assert_eq!(e[0].comments, "years");
        assert_eq!(e[1].value_kind, ValueKind::Date);
        assert_eq!(e[2].value_kind, ValueKind::Text);
        assert!(parse_dictionary(b"variable,type\nx,colour\n").is_err());
    }

    #[test]
    fn coded_value_syntax() {
        assert_eq!(
            parse_coded_values("5='Widowed'"),
            Some(vec![("5".into(), "Widowed".into())])
        );
        assert_eq!(parse_coded_values("Marital status"), None);
        assert_eq!(parse_coded_values("1='a' trailing"), None);
        assert_eq!(parse_coded_values(""), None);
        assert!(parse_dictionary(b"variable,codes\nx,\"1='a' 1='b'\"\n").is_err());
    }
}
