//! Filter expressions over clinical variables and their compilation to SQL.
//!
//! Predicate semantics:
//!
//! * a subject's value for a variable is its first recorded occurrence;
//!   a missing value never satisfies any operator, including `NEQ` and `NOT_IN`;
//! * `EQ`, `NEQ` and `NOT_IN` compare numerically for numeric variables,
//!   by calendar day for date variables, and as exact text otherwise;
//! * `LT` / `GT` are only defined for numeric and date variables;
//! * `LIKE` is an ASCII case-insensitive substring match on the raw value;
//! * `EXACT` is a case-sensitive comparison of the full raw value;
//! * combinators join a predicate to the previous one, with `AND` binding
//!   tighter than `OR`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::QueryError;
use crate::model::{Id, ValueKind};
use crate::values::{parse_date_days, parse_number};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Operator {
    Eq,
    Lt,
    Gt,
    Like,
    Exact,
    Neq,
    NotIn,
}

impl Operator {
    pub const ALL: [Operator; 7] = [
        Operator::Eq,
        Operator::Lt,
        Operator::Gt,
        Operator::Like,
        Operator::Exact,
        Operator::Neq,
        Operator::NotIn,
    ];
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Operator::Eq => "EQ",
            Operator::Lt => "LT",
            Operator::Gt => "GT",
            Operator::Like => "LIKE",
            Operator::Exact => "EXACT",
            Operator::Neq => "NEQ",
            Operator::NotIn => "NOT_IN",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Combinator {
    #[default]
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Text(String),
    List(Vec<String>),
}

impl Operand {
    fn items(&self) -> Vec<&str> {
        match self {
            Operand::Text(s) => vec![s.as_str()],
            Operand::List(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

impl From<&str> for Operand {
    fn from(s: &str) -> Self {
        Operand::Text(s.to_string())
    }
}

/// A variable named either by id or by name within the filter's dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariableRef {
    Id(Id),
    Name(String),
}

impl fmt::Display for VariableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariableRef::Id(id) => write!(f, "#{id}"),
            VariableRef::Name(n) => f.write_str(n),
        }
    }
}

impl From<&str> for VariableRef {
    fn from(s: &str) -> Self {
        VariableRef::Name(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Predicate {
    pub variable: VariableRef,
    pub op: Operator,
    pub operand: Operand,
    /// How this predicate joins the previous one; ignored on the first.
    #[serde(default)]
    pub combinator: Combinator,
}

impl Predicate {
    pub fn new(
        variable: impl Into<VariableRef>,
        op: Operator,
        operand: impl Into<Operand>,
    ) -> Self {
        Predicate {
            variable: variable.into(),
            op,
            operand: operand.into(),
            combinator: Combinator::And,
        }
    }

    pub fn or(mut self) -> Self {
        self.combinator = Combinator::Or;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterExpression {
    pub dataset_id: Id,
    #[serde(default)]
    pub assessment_type_id: Option<Id>,
    #[serde(default)]
    pub predicates: Vec<Predicate>,
}

impl FilterExpression {
    pub fn new(dataset_id: Id) -> Self {
        FilterExpression {
            dataset_id,
            assessment_type_id: None,
            predicates: Vec::new(),
        }
    }

    pub fn with(mut self, p: Predicate) -> Self {
        self.predicates.push(p);
        self
    }

    /// Predicates grouped into OR-ed conjunctions.
    pub fn disjuncts(&self) -> Vec<Vec<&Predicate>> {
        let mut groups: Vec<Vec<&Predicate>> = Vec::new();
        for (i, p) in self.predicates.iter().enumerate() {
            if i == 0 || p.combinator == Combinator::Or {
                groups.push(vec![p]);
            } else {
                groups.last_mut().unwrap().push(p);
            }
        }
        groups
    }
}

/// Positional parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SqlValue {
    Int(i64),
    Real(f64),
    Text(String),
}

impl SqlValue {
    /// SQL literal form, used when inlining parameters for hand editing.
    pub fn to_literal(&self) -> String {
        match self {
            SqlValue::Int(i) => i.to_string(),
            SqlValue::Real(f) => format!("{f}"),
            SqlValue::Text(s) => format!("'{}'", s.replace('\'', "''")),
        }
    }
}

impl rusqlite::ToSql for SqlValue {
    fn to_sql(&self) -> rusqlite::Result<rusqlite::types::ToSqlOutput<'_>> {
        use rusqlite::types::{ToSqlOutput, ValueRef};
        Ok(match self {
            SqlValue::Int(i) => ToSqlOutput::Borrowed(ValueRef::Integer(*i)),
            SqlValue::Real(f) => ToSqlOutput::Borrowed(ValueRef::Real(*f)),
            SqlValue::Text(s) => ToSqlOutput::Borrowed(ValueRef::Text(s.as_bytes())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledQuery {
    pub sql_text: String,
    pub bindings: Vec<SqlValue>,
    /// Output column names in order.
    pub columns: Vec<String>,
}

impl CompiledQuery {
    pub fn placeholder_count(&self) -> usize {
        // Generated SQL quotes every identifier that could hold a `?`, so
        // placeholders are exactly the unquoted ones.
        let mut n = 0;
        let mut quote: Option<char> = None;
        for c in self.sql_text.chars() {
            match (quote, c) {
                (None, '\'' | '"') => quote = Some(c),
                (Some(q), c) if c == q => quote = None,
                (None, '?') => n += 1,
                _ => {}
            }
        }
        n
    }
}

/// Default image columns, in export order, with their source expressions.
pub const DEFAULT_FIELDS: [(&str, &str); 8] = [
    ("imagefile_name", "i.file_name"),
    ("lfn", "i.lfn"),
    ("imagefile_type", "i.file_type"),
    ("imagefile_description", "i.description"),
    ("added_on", "i.added_on"),
    ("dataset_id", "i.dataset_id"),
    ("subject_id", "i.subject_dir"),
    ("assessment_type", ""),
];

/// A predicate variable after lookup in the catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedVariable {
    pub id: Id,
    pub name: String,
    pub kind: ValueKind,
}

pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Emits `?` and records a binding, or emits the literal directly.
struct Emitter {
    inline: bool,
    bindings: Vec<SqlValue>,
}

impl Emitter {
    fn param(&mut self, v: SqlValue) -> String {
        if self.inline {
            v.to_literal()
        } else {
            self.bindings.push(v);
            "?".to_string()
        }
    }
}

fn escape_like(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('%');
    for c in s.chars() {
        if matches!(c, '%' | '_' | '!') {
            out.push('!');
        }
        out.push(c);
    }
    out.push('%');
    out
}

fn type_mismatch(var: &ResolvedVariable, op: Operator, reason: impl Into<String>) -> QueryError {
    QueryError::TypeMismatch {
        variable: var.name.clone(),
        op: op.to_string(),
        reason: reason.into(),
    }
}

/// Comparison key of an operand for a numeric or date variable.
fn operand_key(var: &ResolvedVariable, op: Operator, raw: &str) -> Result<SqlValue, QueryError> {
    match var.kind {
        ValueKind::Numeric => parse_number(raw)
            .map(SqlValue::Real)
            .ok_or_else(|| type_mismatch(var, op, format!("`{raw}` is not a number"))),
        ValueKind::Date => parse_date_days(raw)
            .map(|d| SqlValue::Real(d as f64))
            .ok_or_else(|| type_mismatch(var, op, format!("`{raw}` is not a YYYY-MM-DD date"))),
        ValueKind::Text => Ok(SqlValue::Text(raw.to_string())),
    }
}

fn single(p: &Predicate) -> Result<&str, QueryError> {
    match &p.operand {
        Operand::Text(s) => Ok(s),
        Operand::List(v) if v.len() == 1 => Ok(&v[0]),
        Operand::List(_) => Err(QueryError::InvalidFilter(format!(
            "operator {} on `{}` takes a single operand",
            p.op, p.variable
        ))),
    }
}

fn condition(
    alias: &str,
    p: &Predicate,
    var: &ResolvedVariable,
    em: &mut Emitter,
) -> Result<String, QueryError> {
    let typed_col = if var.kind == ValueKind::Text {
        format!("{alias}.value")
    } else {
        format!("{alias}.num_value")
    };
    let raw_col = format!("{alias}.value");
    let present = format!("{typed_col} IS NOT NULL");
    Ok(match p.op {
        Operator::Eq | Operator::Neq => {
            let key = operand_key(var, p.op, single(p)?)?;
            let sym = if p.op == Operator::Eq { "=" } else { "<>" };
            format!("({present} AND {typed_col} {sym} {})", em.param(key))
        }
        Operator::Lt | Operator::Gt => {
            if !var.kind.is_ordered() {
                return Err(type_mismatch(
                    var,
                    p.op,
                    format!("`{}` holds {} values", var.name, var.kind),
                ));
            }
            let key = operand_key(var, p.op, single(p)?)?;
            let sym = if p.op == Operator::Lt { "<" } else { ">" };
            format!("({present} AND {typed_col} {sym} {})", em.param(key))
        }
        Operator::Like => {
            let pattern = escape_like(single(p)?);
            format!(
                "({raw_col} IS NOT NULL AND {raw_col} LIKE {} ESCAPE '!')",
                em.param(SqlValue::Text(pattern))
            )
        }
        Operator::Exact => {
            let v = SqlValue::Text(single(p)?.to_string());
            format!("({raw_col} IS NOT NULL AND {raw_col} = {})", em.param(v))
        }
        Operator::NotIn => {
            let items = p.operand.items();
            if items.is_empty() {
                return Err(QueryError::InvalidFilter(format!(
                    "NOT_IN on `{}` needs at least one operand",
                    p.variable
                )));
            }
            let keys = items
                .into_iter()
                .map(|raw| operand_key(var, p.op, raw).map(|k| em.param(k)))
                .collect::<Result<Vec<_>, _>>()?;
            format!("({present} AND {typed_col} NOT IN ({}))", keys.join(", "))
        }
    })
}

/// Build the SELECT for a filter whose variables are already resolved
/// (`resolved[i]` belongs to `filter.predicates[i]`).
///
/// With `inline` set, parameters are rendered as literals and `bindings` is empty.
pub fn compile_resolved(
    filter: &FilterExpression,
    resolved: &[ResolvedVariable],
    assessment_label: &str,
    inline: bool,
) -> Result<CompiledQuery, QueryError> {
    assert_eq!(filter.predicates.len(), resolved.len());
    let mut em = Emitter {
        inline,
        bindings: Vec::new(),
    };

    let mut columns: Vec<String> = DEFAULT_FIELDS.iter().map(|(n, _)| n.to_string()).collect();
    let mut select = Vec::new();
    for (name, expr) in DEFAULT_FIELDS {
        if name == "assessment_type" {
            let label = em.param(SqlValue::Text(assessment_label.to_string()));
            select.push(format!("{label} AS {name}"));
        } else {
            select.push(format!("{expr} AS {name}"));
        }
    }
    // One output column per distinct variable, taken from its first predicate.
    for (i, var) in resolved.iter().enumerate() {
        if resolved[..i].iter().any(|v| v.id == var.id) || columns.contains(&var.name) {
            continue;
        }
        select.push(format!("p{i}.value AS {}", quote_ident(&var.name)));
        columns.push(var.name.clone());
    }

    let mut from = String::from("imagefile AS i LEFT JOIN subject AS s ON s.id = i.subject_id");
    for (i, var) in resolved.iter().enumerate() {
        let vid = em.param(SqlValue::Int(var.id));
        from.push_str(&format!(
            " LEFT JOIN assessment_value AS p{i} ON p{i}.subject_id = s.id \
             AND p{i}.variable_id = {vid} AND p{i}.occurrence = 0"
        ));
    }

    let dataset = em.param(SqlValue::Int(filter.dataset_id));
    let mut where_clause = format!("i.dataset_id = {dataset}");
    if !filter.predicates.is_empty() {
        let mut index = 0;
        let mut ors = Vec::new();
        for group in filter.disjuncts() {
            let mut ands = Vec::new();
            for p in group {
                ands.push(condition(
                    &format!("p{index}"),
                    p,
                    &resolved[index],
                    &mut em,
                )?);
                index += 1;
            }
            ors.push(format!("({})", ands.join(" AND ")));
        }
        where_clause.push_str(&format!(" AND ({})", ors.join(" OR ")));
    }

    let sql_text = format!(
        "SELECT {} FROM {from} WHERE {where_clause} ORDER BY i.lfn",
        select.join(", ")
    );
    Ok(CompiledQuery {
        sql_text,
        bindings: em.bindings,
        columns,
    })
}
