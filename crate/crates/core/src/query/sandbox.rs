//! Validation of hand-written SQL before it touches the store.
//!
//! A statement is accepted only if it parses as exactly one `SELECT` whose
//! every relation is a catalog table (or a CTE it defines) and whose every
//! function is on a small allowlist. The re-rendered AST, not the user's
//! text, is what gets executed, so comments and odd spacing never reach
//! SQLite. Execution then happens on a read-only connection with an
//! authorizer enforcing the same rules, as a second line of defense.

use std::collections::HashSet;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use rusqlite::hooks::{AuthAction, AuthContext, Authorization};
use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    Expr, ObjectName, ObjectNamePart, Query, SetExpr, Statement, TableFactor, Value, Visit, Visitor,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use sqlparser::tokenizer::{Token, Tokenizer};
use thiserror::Error;

use crate::store::CATALOG_TABLES;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum SandboxError {
    #[error("could not parse query: {0}")]
    ParseError(String),
    #[error("only SELECT statements are allowed, found {0}")]
    MutationForbidden(String),
    #[error("only a single statement is allowed")]
    MultiStatement,
    #[error("table `{0}` is not queryable")]
    NonWhitelistedTable(String),
    #[error("{0} is not allowed")]
    Forbidden(String),
    #[error("query exceeded the {0} ms time limit")]
    Timeout(u64),
}

/// Scalar, aggregate and window functions a sandboxed query may call.
pub const ALLOWED_FUNCTIONS: &[&str] = &[
    "abs",
    "avg",
    "char",
    "coalesce",
    "count",
    "date",
    "datetime",
    "dense_rank",
    "first_value",
    "glob",
    "group_concat",
    "hex",
    "ifnull",
    "iif",
    "instr",
    "julianday",
    "lag",
    "last_value",
    "lead",
    "length",
    "like",
    "lower",
    "ltrim",
    "max",
    "min",
    "nullif",
    "ntile",
    "printf",
    "quote",
    "rank",
    "replace",
    "round",
    "row_number",
    "rtrim",
    "sign",
    "strftime",
    "string_agg",
    "substr",
    "substring",
    "sum",
    "time",
    "total",
    "trim",
    "typeof",
    "unicode",
    "upper",
];

fn table_allowed(name: &str) -> bool {
    CATALOG_TABLES.iter().any(|t| t.eq_ignore_ascii_case(name))
}

fn function_allowed(name: &str) -> bool {
    ALLOWED_FUNCTIONS
        .iter()
        .any(|f| f.eq_ignore_ascii_case(name))
}

fn statement_kind(stmt: &Statement) -> String {
    let text = stmt.to_string();
    let mut words = text.split_whitespace();
    let first = words.next().unwrap_or("statement").to_ascii_uppercase();
    match first.as_str() {
        "CREATE" | "DROP" | "ALTER" => match words.next() {
            Some(w) => format!("{first} {}", w.to_ascii_uppercase()),
            None => first,
        },
        _ => first,
    }
}

struct Inspector {
    ctes: HashSet<String>,
}

impl Inspector {
    fn single_name(name: &ObjectName) -> Option<String> {
        match name.0.as_slice() {
            [ObjectNamePart::Identifier(id)] => Some(id.value.clone()),
            _ => None,
        }
    }
}

impl Visitor for Inspector {
    type Break = SandboxError;

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<Self::Break> {
        if let Some(with) = &query.with {
            if with.recursive {
                return ControlFlow::Break(SandboxError::Forbidden("WITH RECURSIVE".into()));
            }
            for cte in &with.cte_tables {
                self.ctes.insert(cte.alias.name.value.to_ascii_lowercase());
            }
        }
        match query.body.as_ref() {
            SetExpr::Insert(_) | SetExpr::Update(_) | SetExpr::Delete(_) | SetExpr::Merge(_) => {
                ControlFlow::Break(SandboxError::MutationForbidden(
                    "a data-modifying subquery".into(),
                ))
            }
            _ => ControlFlow::Continue(()),
        }
    }

    fn pre_visit_select(&mut self, select: &sqlparser::ast::Select) -> ControlFlow<Self::Break> {
        if select.into.is_some() {
            return ControlFlow::Break(SandboxError::MutationForbidden("SELECT INTO".into()));
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, relation: &ObjectName) -> ControlFlow<Self::Break> {
        match Self::single_name(relation) {
            Some(name)
                if table_allowed(&name) || self.ctes.contains(&name.to_ascii_lowercase()) =>
            {
                ControlFlow::Continue(())
            }
            _ => ControlFlow::Break(SandboxError::NonWhitelistedTable(relation.to_string())),
        }
    }

    fn pre_visit_table_factor(&mut self, factor: &TableFactor) -> ControlFlow<Self::Break> {
        match factor {
            TableFactor::Table {
                args: Some(_),
                name,
                ..
            } => ControlFlow::Break(SandboxError::Forbidden(format!(
                "table-valued function `{name}`"
            ))),
            TableFactor::Table { .. }
            | TableFactor::Derived { .. }
            | TableFactor::NestedJoin { .. } => ControlFlow::Continue(()),
            other => ControlFlow::Break(SandboxError::Forbidden(format!(
                "table expression `{other}`"
            ))),
        }
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<Self::Break> {
        match expr {
            Expr::Function(f) => match Self::single_name(&f.name) {
                Some(name) if function_allowed(&name) => ControlFlow::Continue(()),
                _ => ControlFlow::Break(SandboxError::Forbidden(format!("function `{}`", f.name))),
            },
            Expr::Value(v) if matches!(v.value, Value::Placeholder(_)) => {
                ControlFlow::Break(SandboxError::Forbidden("parameter placeholders".into()))
            }
            _ => ControlFlow::Continue(()),
        }
    }
}

/// Validate `raw_sql` and return the canonical SELECT text to execute.
pub fn check(raw_sql: &str) -> Result<String, SandboxError> {
    if raw_sql.trim().is_empty() {
        return Err(SandboxError::ParseError("empty query".into()));
    }
    let dialect = SQLiteDialect {};
    let tokens = Tokenizer::new(&dialect, raw_sql)
        .tokenize()
        .map_err(|e| SandboxError::ParseError(e.to_string()))?;
    if tokens.iter().any(|t| matches!(t, Token::SemiColon)) {
        return Err(SandboxError::MultiStatement);
    }
    let mut statements = Parser::parse_sql(&dialect, raw_sql)
        .map_err(|e| SandboxError::ParseError(e.to_string()))?;
    if statements.len() != 1 {
        return Err(if statements.is_empty() {
            SandboxError::ParseError("no statement".into())
        } else {
            SandboxError::MultiStatement
        });
    }
    let stmt = statements.pop().unwrap();
    if !matches!(stmt, Statement::Query(_)) {
        return Err(SandboxError::MutationForbidden(statement_kind(&stmt)));
    }
    let mut inspector = Inspector {
        ctes: HashSet::new(),
    };
    if let ControlFlow::Break(e) = stmt.visit(&mut inspector) {
        return Err(e);
    }
    Ok(stmt.to_string())
}

/// Restrict `conn` to reading catalog tables, with a wall-clock limit.
pub fn lock_down(conn: &Connection, timeout: Duration) -> rusqlite::Result<()> {
    conn.authorizer(Some(|ctx: AuthContext<'_>| match ctx.action {
        AuthAction::Select => Authorization::Allow,
        AuthAction::Read { table_name, .. } if table_allowed(table_name) => Authorization::Allow,
        AuthAction::Function { function_name } if function_allowed(function_name) => {
            Authorization::Allow
        }
        _ => Authorization::Deny,
    }))?;
    let deadline = Instant::now() + timeout;
    conn.progress_handler(10_000, Some(move || Instant::now() > deadline))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_plain_selects() {
        let sql =
            check("select file_name from imagefile where lfn like '%MPR%' order by lfn").unwrap();
        assert!(sql.starts_with("SELECT"));
        check("WITH x AS (SELECT id FROM subject) SELECT count(*) FROM x").unwrap();
        check("SELECT s.subject_code FROM subject s JOIN (SELECT * FROM imagefile) i ON i.subject_id = s.id")
            .unwrap();
    }

    #[test]
    fn classifies_rejections() {
        assert_eq!(
            check("DELETE FROM imagefile"),
            Err(SandboxError::MutationForbidden("DELETE".into()))
        );
        assert_eq!(
            check("SELECT 1; DROP TABLE subject"),
            Err(SandboxError::MultiStatement)
        );
        assert_eq!(check("SELECT 1;"), Err(SandboxError::MultiStatement));
        assert!(matches!(
            check("SELECT * FROM sqlite_master"),
            Err(SandboxError::NonWhitelistedTable(_))
        ));
        assert!(matches!(
            check("SELECT * FROM main.subject"),
            Err(SandboxError::NonWhitelistedTable(_))
        ));
        assert!(matches!(
            check("SELECT load_extension('x')"),
            Err(SandboxError::Forbidden(_))
        ));
        assert!(matches!(check("SELEC 1"), Err(SandboxError::ParseError(_))));
        assert!(matches!(check("   "), Err(SandboxError::ParseError(_))));
    }

    #[test]
    fn comments_do_not_hide_statements() {
        assert_eq!(
            check("SELECT 1 /* ; */ ; DELETE FROM subject"),
            Err(SandboxError::MultiStatement)
        );
        // A separator inside a comment or string is not a separator.
        check("SELECT 1 -- ; DELETE FROM subject").unwrap();
        check("SELECT ';' FROM subject").unwrap();
    }
}
