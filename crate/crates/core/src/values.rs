//! Typed interpretation of raw clinical values.
//!
//! Values are stored as raw text. Numeric and date variables additionally
//! carry a sortable key (`num_value`) so comparisons never depend on
//! SQL-side casting of arbitrary text.

use chrono::{Datelike, NaiveDate};

use crate::model::ValueKind;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Finite number parsed from `raw`, if any.
pub fn parse_number(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|f| f.is_finite())
}

/// Days since 0001-01-01 for an ISO `YYYY-MM-DD` date.
pub fn parse_date_days(raw: &str) -> Option<i64> {
    NaiveDate::parse_from_str(raw.trim(), DATE_FORMAT)
        .ok()
        .map(|d| i64::from(d.num_days_from_ce()))
}

/// Comparison key for a value of the given kind; `None` for text or unparseable input.
pub fn sort_key(kind: ValueKind, raw: &str) -> Option<f64> {
    match kind {
        ValueKind::Numeric => parse_number(raw),
        ValueKind::Date => parse_date_days(raw).map(|d| d as f64),
        ValueKind::Text => None,
    }
}

/// Guess a kind for a column that no dictionary describes.
pub fn infer_kind<'a>(values: impl IntoIterator<Item = &'a str>) -> ValueKind {
    let mut any = false;
    for v in values {
        any = true;
        if parse_number(v).is_none() {
            return ValueKind::Text;
        }
    }
    if any {
        ValueKind::Numeric
    } else {
        ValueKind::Text
    }
}
