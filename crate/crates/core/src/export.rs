//! XML and CSV serialization of query results.
//!
//! Every record carries the eight default image fields in a fixed order,
//! followed by one field per filter variable. Writers work row by row so an
//! export never holds the whole result in memory.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::Utc;
use indexmap::IndexMap;
use quick_xml::escape::{escape, resolve_predefined_entity};
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::query::{QueryError, DEFAULT_FIELDS};

pub type Record = IndexMap<String, String>;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("result is missing default field `{0}`")]
    MissingDefaultField(String),
    #[error("`{0}` cannot be used as an XML element name")]
    InvalidFieldName(String),
    #[error("malformed export: {0}")]
    Malformed(String),
    #[error("field `{field}` holds U+{code:04X}, which XML 1.0 cannot represent")]
    UnrepresentableInXml { field: String, code: u32 },
    #[error("unsupported export format `{0}` (expected xml or csv)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Query(#[from] QueryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Xml,
    Csv,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Xml => "xml",
            ExportFormat::Csv => "csv",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            ExportFormat::Xml => "application/xml",
            ExportFormat::Csv => "text/csv",
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for ExportFormat {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xml" => Ok(ExportFormat::Xml),
            "csv" => Ok(ExportFormat::Csv),
            _ => Err(ExportError::UnknownFormat(s.to_string())),
        }
    }
}

pub fn default_fields() -> Vec<String> {
    DEFAULT_FIELDS.iter().map(|(n, _)| n.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportDocument {
    pub format: ExportFormat,
    pub default_fields: Vec<String>,
    pub variable_fields: Vec<String>,
    #[serde(skip)]
    pub body: Vec<u8>,
    pub suggested_filename: String,
}

static STAMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// `atlas-export-<UTC basic timestamp, ms>-<counter>.<ext>`, unique within the process.
pub fn stamp_filename(format: ExportFormat) -> String {
    let n = STAMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let ts = Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    format!("atlas-export-{ts}-{n:06}.{}", format.extension())
}

/// XML 1.0 `Name` without colons, so field names never imply namespaces.
pub fn is_element_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Text escaped for element content. Carriage returns and C1 controls become
/// character references so parsers cannot normalize them away. C0 controls
/// other than tab, newline and carriage return have no XML 1.0 spelling at all.
fn escape_text(field: &str, value: &str) -> Result<String, ExportError> {
    let escaped = escape(value);
    if !escaped
        .chars()
        .any(|c| c.is_control() && c != '\n' && c != '\t')
    {
        return Ok(escaped.into_owned());
    }
    let mut out = String::with_capacity(escaped.len() + 8);
    for c in escaped.chars() {
        match c {
            '\n' | '\t' => out.push(c),
            '\r' => out.push_str("&#13;"),
            c if (c as u32) < 0x20 => {
                return Err(ExportError::UnrepresentableInXml {
                    field: field.to_string(),
                    code: c as u32,
                })
            }
            c if c.is_control() => out.push_str(&format!("&#{};", c as u32)),
            c => out.push(c),
        }
    }
    Ok(out)
}

enum Sink<W: Write> {
    Xml(W),
    Csv(Box<csv::Writer<W>>),
}

/// Row-at-a-time export writer.
pub struct ExportWriter<W: Write> {
    sink: Sink<W>,
    fields: Vec<String>,
    /// Position of each output field in the input row.
    order: Vec<usize>,
    default_count: usize,
}

impl<W: Write> ExportWriter<W> {
    /// `columns` names the values of the rows that will be written; they must
    /// include every default field. Output lists the defaults first, then the
    /// remaining columns in their given order.
    pub fn new(format: ExportFormat, out: W, columns: &[String]) -> Result<Self, ExportError> {
        let mut order = Vec::with_capacity(columns.len());
        for (name, _) in DEFAULT_FIELDS {
            let idx = columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| ExportError::MissingDefaultField(name.to_string()))?;
            order.push(idx);
        }
        let default_count = order.len();
        for i in 0..columns.len() {
            if !order.contains(&i) {
                order.push(i);
            }
        }
        let fields: Vec<String> = order.iter().map(|&i| columns[i].clone()).collect();
        let sink = match format {
            ExportFormat::Xml => {
                if let Some(bad) = fields.iter().find(|f| !is_element_name(f)) {
                    return Err(ExportError::InvalidFieldName(bad.clone()));
                }
                let mut out = out;
                out.write_all(b"<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<Records>\n")?;
                Sink::Xml(out)
            }
            ExportFormat::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(&fields)?;
                Sink::Csv(Box::new(w))
            }
        };
        Ok(ExportWriter {
            sink,
            fields,
            order,
            default_count,
        })
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn variable_fields(&self) -> &[String] {
        &self.fields[self.default_count..]
    }

    /// Write one row whose values follow the `columns` given to [`ExportWriter::new`].
    pub fn write_row(&mut self, row: &[String]) -> Result<(), ExportError> {
        if row.len() != self.order.len() {
            return Err(ExportError::Malformed(format!(
                "row has {} values, expected {}",
                row.len(),
                self.order.len()
            )));
        }
        let values: Vec<&str> = self.order.iter().map(|&i| row[i].as_str()).collect();
        self.emit(&values)
    }

    /// Write one record looked up by field name; absent variable fields are empty.
    pub fn write_record(&mut self, record: &Record) -> Result<(), ExportError> {
        let mut values = Vec::with_capacity(self.fields.len());
        for (pos, field) in self.fields.iter().enumerate() {
            match record.get(field) {
                Some(v) => values.push(v.as_str()),
                None if pos < self.default_count => {
                    return Err(ExportError::MissingDefaultField(field.clone()))
                }
                None => values.push(""),
            }
        }
        self.emit(&values)
    }

    fn emit(&mut self, values: &[&str]) -> Result<(), ExportError> {
        match &mut self.sink {
            Sink::Xml(out) => {
                let mut buf = String::from("<Record>\n");
                for (field, value) in self.fields.iter().zip(values) {
                    buf.push_str(&format!(
                        "<{field}>{}</{field}>\n",
                        escape_text(field, value)?
                    ));
                }
                buf.push_str("</Record>\n");
                out.write_all(buf.as_bytes())?;
            }
            Sink::Csv(w) => w.write_record(values)?,
        }
        Ok(())
    }

    pub fn finish(self) -> Result<W, ExportError> {
        match self.sink {
            Sink::Xml(mut out) => {
                out.write_all(b"</Records>\n")?;
                out.flush()?;
                Ok(out)
            }
            Sink::Csv(w) => w.into_inner().map_err(|e| ExportError::Io(e.into_error())),
        }
    }
}

fn export(
    format: ExportFormat,
    rows: &[Record],
    variable_fields: &[String],
) -> Result<ExportDocument, ExportError> {
    let mut columns = default_fields();
    columns.extend(
        variable_fields
            .iter()
            .filter(|v| !columns.contains(v))
            .cloned()
            .collect::<Vec<_>>(),
    );
    let mut w = ExportWriter::new(format, Vec::new(), &columns)?;
    for r in rows {
        w.write_record(r)?;
    }
    let variable_fields = w.variable_fields().to_vec();
    let body = w.finish()?;
    Ok(ExportDocument {
        format,
        default_fields: default_fields(),
        variable_fields,
        body,
        suggested_filename: stamp_filename(format),
    })
}

pub fn export_xml(
    rows: &[Record],
    variable_fields: &[String],
) -> Result<ExportDocument, ExportError> {
    export(ExportFormat::Xml, rows, variable_fields)
}

pub fn export_csv(
    rows: &[Record],
    variable_fields: &[String],
) -> Result<ExportDocument, ExportError> {
    export(ExportFormat::Csv, rows, variable_fields)
}

/// Records of an XML export, in document order.
pub fn parse_xml(body: &[u8]) -> Result<Vec<Record>, ExportError> {
    let text = std::str::from_utf8(body).map_err(|e| ExportError::Malformed(e.to_string()))?;
    let mut reader = Reader::from_str(text);
    let mut records = Vec::new();
    let mut current: Option<Record> = None;
    let mut field: Option<(String, String)> = None;
    let malformed = |e: &dyn fmt::Display| ExportError::Malformed(e.to_string());
    loop {
        match reader.read_event().map_err(|e| malformed(&e))? {
            Event::Start(e) => {
                let name = e.name().as_ref().to_string();
                match (&current, &field, name.as_str()) {
                    (None, _, "Records") => {}
                    (None, _, "Record") => current = Some(Record::new()),
                    (Some(_), None, _) => field = Some((name, String::new())),
                    _ => return Err(ExportError::Malformed(format!("unexpected <{name}>"))),
                }
            }
            Event::Empty(e) => {
                let name = e.name().as_ref().to_string();
                match current.as_mut() {
                    Some(r) if field.is_none() => {
                        r.insert(name, String::new());
                    }
                    None if name == "Record" => records.push(Record::new()),
                    _ => return Err(ExportError::Malformed(format!("unexpected <{name}/>"))),
                }
            }
            Event::Text(t) => {
                if let Some((_, value)) = field.as_mut() {
                    value.push_str(&t.xml10_content());
                }
            }
            Event::CData(t) => {
                if let Some((_, value)) = field.as_mut() {
                    value.push_str(&t.xml10_content());
                }
            }
            Event::GeneralRef(r) => {
                if let Some((_, value)) = field.as_mut() {
                    match r.resolve_char_ref().map_err(|e| malformed(&e))? {
                        Some(c) => value.push(c),
                        None => value.push_str(resolve_predefined_entity(&r).ok_or_else(|| {
                            ExportError::Malformed(format!("unknown entity &{};", &*r))
                        })?),
                    }
                }
            }
            Event::End(e) => {
                let name = e.name().as_ref().to_string();
                if let Some((fname, value)) = field.take() {
                    current
                        .as_mut()
                        .expect("field inside record")
                        .insert(fname, value);
                } else if name == "Record" {
                    records.push(current.take().expect("record open"));
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(records)
}

/// Records of a CSV export; the header names the fields.
pub fn parse_csv(body: &[u8]) -> Result<Vec<Record>, ExportError> {
    let mut reader = csv::Reader::from_reader(body);
    let headers = reader.headers()?.clone();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        records.push(
            headers
                .iter()
                .map(String::from)
                .zip(row.iter().map(String::from))
                .collect(),
        );
    }
    Ok(records)
}

pub fn parse(format: ExportFormat, body: &[u8]) -> Result<Vec<Record>, ExportError> {
    match format {
        ExportFormat::Xml => parse_xml(body),
        ExportFormat::Csv => parse_csv(body),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Record {
        let mut r = Record::new();
        for (k, v) in [
            ("imagefile_name", "nG+NUSDAST+CC7959+M0+1T5+3DSF+ORIG+V01.tar.bz2"),
            ("lfn", "/grid/vo.neugrid.eu/data/NUSDAST/IMAGES/nG+NUSDAST+CC7959/nG+NUSDAST+CC7959+M0+1T5+3DSF+ORIG+V01.tar.bz2"),
            ("imagefile_type", ".bz2"),
            ("imagefile_description", ""),
            ("added_on", ""),
            ("dataset_id", "32"),
            ("subject_id", "nG+NUSDAST+CC7959"),
            ("assessment_type", "NUSDAST"),
            ("maritalstatus", "4"),
            ("race", "2"),
            ("gender", "male"),
        ] {
            r.insert(k.into(), v.into());
        }
        r
    }

    fn vars() -> Vec<String> {
        ["maritalstatus", "race", "gender"]
            .map(String::from)
            .to_vec()
    }

    #[test]
    fn empty_results() {
        let x = export_xml(&[], &[]).unwrap();
        assert_eq!(parse_xml(&x.body).unwrap().len(), 0);
        assert!(String::from_utf8(x.body).unwrap().contains("<Records>"));
        let c = export_csv(&[], &[]).unwrap();
        assert_eq!(String::from_utf8(c.body).unwrap().lines().count(), 1);
    }

    #[test]
    fn empty_values_are_open_close_pairs() {
        let x = export_xml(&[sample()], &vars()).unwrap();
        let text = String::from_utf8(x.body).unwrap();
        assert!(text.contains("<imagefile_description></imagefile_description>"));
        assert!(text.contains("<maritalstatus>4</maritalstatus>"));
    }

    #[test]
    fn missing_default_field() {
        let mut r = sample();
        r.shift_remove("lfn");
        assert!(
            matches!(export_csv(&[r], &vars()), Err(ExportError::MissingDefaultField(f)) if f == "lfn")
        );
    }

    #[test]
    fn awkward_values_round_trip() {
        let mut r = sample();
        r.insert("gender".into(), "a,\"b\"\r\n<c> & 'd'\u{7f}\u{85}".into());
        for format in [ExportFormat::Xml, ExportFormat::Csv] {
            let doc = export(format, std::slice::from_ref(&r), &vars()).unwrap();
            assert_eq!(
                parse(format, &doc.body).unwrap(),
                vec![r.clone()],
                "{format}"
            );
        }
    }

    #[test]
    fn element_names() {
        assert!(is_element_name("maritalstatus"));
        assert!(is_element_name("age_at_scan.v2"));
        assert!(!is_element_name("3dsf"));
        assert!(!is_element_name("a b"));
        assert!(!is_element_name("ns:x"));
        let mut r = sample();
        r.insert("bad name".into(), "1".into());
        assert!(matches!(
            export_xml(&[r], &["bad name".to_string()]),
            Err(ExportError::InvalidFieldName(_))
        ));
    }

    #[test]
    fn stamps() {
        let a = stamp_filename(ExportFormat::Xml);
        let b = stamp_filename(ExportFormat::Xml);
        assert_ne!(a, b);
        assert!(a.starts_with("atlas-export-") && a.ends_with(".xml"));
        assert!(stamp_filename(ExportFormat::Csv).ends_with(".csv"));
    }
}
