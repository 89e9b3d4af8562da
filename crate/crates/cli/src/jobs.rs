//! Operations shared by the CLI and the HTTP service.

use std::io::Write;

use atlas_core::export::{ExportError, ExportFormat, ExportWriter};
use atlas_core::query::{CompiledQuery, Operand, Operator, Predicate};
use atlas_core::QueryEngine;
use serde::{Deserialize, Serialize};

/// A query whose full result can be exported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuerySource {
    Compiled(CompiledQuery),
    Sql { sql: String },
}

/// Stream every row of `source` through an export writer into `out`.
/// Returns the sink and the number of records written.
pub fn export_to<W: Write>(
    engine: &QueryEngine,
    source: &QuerySource,
    format: ExportFormat,
    out: W,
) -> Result<(W, u64), ExportError> {
    let mut out = Some(out);
    let mut writer: Option<ExportWriter<W>> = None;
    let mut count = 0u64;
    let mut sink = |cols: &[String], row: &[String]| -> Result<(), ExportError> {
        if writer.is_none() {
            writer = Some(ExportWriter::new(
                format,
                out.take().expect("sink used once"),
                cols,
            )?);
        }
        writer
            .as_mut()
            .expect("writer initialised")
            .write_row(row)?;
        count += 1;
        Ok(())
    };
    let columns = match source {
        QuerySource::Compiled(q) => engine.stream(q, &mut sink)?,
        QuerySource::Sql { sql } => engine.stream_sandboxed(sql, &mut sink)?,
    };
    let writer = match writer {
        Some(w) => w,
        None => ExportWriter::new(format, out.take().expect("sink unused"), &columns)?,
    };
    Ok((writer.finish()?, count))
}

/// Read a `--where` predicate.
///
/// Short forms: `var=v` (EQ), `var!=v`, `var<v`, `var>v`, `var~v` (LIKE),
/// `var==v` (EXACT). Long form: `var:OP:v`, where NOT_IN takes a
/// comma-separated list. A leading `|` joins the predicate with OR.
pub fn parse_where(text: &str) -> anyhow::Result<Predicate> {
    let (or, body) = match text.strip_prefix('|') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let bad = || anyhow::anyhow!("cannot read predicate `{text}` (try var=value or var:OP:value)");
    let (variable, op, value) = if let Some((var, rest)) = body.split_once(':') {
        let (op, value) = rest.split_once(':').ok_or_else(bad)?;
        let op: Operator =
            serde_json::from_value(serde_json::Value::String(op.trim().to_ascii_uppercase()))
                .map_err(|_| anyhow::anyhow!("unknown operator `{op}`"))?;
        (var, op, value)
    } else {
        let at = body.find(['=', '!', '<', '>', '~']).ok_or_else(bad)?;
        let rest = &body[at..];
        let (op, len) = match rest.as_bytes() {
            [b'!', b'=', ..] => (Operator::Neq, 2),
            [b'=', b'=', ..] => (Operator::Exact, 2),
            [b'=', ..] => (Operator::Eq, 1),
            [b'<', ..] => (Operator::Lt, 1),
            [b'>', ..] => (Operator::Gt, 1),
            [b'~', ..] => (Operator::Like, 1),
            _ => return Err(bad()),
        };
        (&body[..at], op, &rest[len..])
    };
    let variable = variable.trim();
    if variable.is_empty() {
        return Err(bad());
    }
    let operand = match op {
        Operator::NotIn => Operand::List(value.split(',').map(|v| v.trim().to_string()).collect()),
        _ => Operand::Text(value.to_string()),
    };
    let p = Predicate::new(variable, op, operand);
    Ok(if or { p.or() } else { p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_and_long_forms() {
        let p = parse_where("maritalstatus=2").unwrap();
        assert_eq!(p, Predicate::new("maritalstatus", Operator::Eq, "2"));
        assert_eq!(parse_where("age!=3").unwrap().op, Operator::Neq);
        assert_eq!(
            parse_where("notes==O'Brien").unwrap(),
            Predicate::new("notes", Operator::Exact, "O'Brien")
        );
        assert_eq!(parse_where("age<30").unwrap().op, Operator::Lt);
        assert_eq!(parse_where("notes~alp").unwrap().op, Operator::Like);
        let ni = parse_where("|race:not_in:1, 2").unwrap();
        assert_eq!(
            ni,
            Predicate::new(
                "race",
                Operator::NotIn,
                Operand::List(vec!["1".into(), "2".into()])
            )
            .or()
        );
        assert!(parse_where("race").is_err());
        assert!(parse_where("=2").is_err());
        assert!(parse_where("race:BETWEEN:1").is_err());
    }
}
