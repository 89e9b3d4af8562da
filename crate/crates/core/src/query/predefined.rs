//! Canned queries offered without any filter building.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::filter::{CompiledQuery, SqlValue, DEFAULT_FIELDS};
use super::QueryError;
use crate::model::Id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredefinedQuery {
    AllDatasets,
    AllImagefiles,
    SearchImagefiles,
    SearchImagefilesInDataset,
}

impl PredefinedQuery {
    pub const ALL: [PredefinedQuery; 4] = [
        PredefinedQuery::AllDatasets,
        PredefinedQuery::AllImagefiles,
        PredefinedQuery::SearchImagefiles,
        PredefinedQuery::SearchImagefilesInDataset,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PredefinedQuery::AllDatasets => "all_datasets",
            PredefinedQuery::AllImagefiles => "all_imagefiles",
            PredefinedQuery::SearchImagefiles => "search_imagefiles",
            PredefinedQuery::SearchImagefilesInDataset => "search_imagefiles_in_dataset",
        }
    }
}

impl FromStr for PredefinedQuery {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PredefinedQuery::ALL
            .into_iter()
            .find(|q| q.id() == s)
            .ok_or_else(|| QueryError::UnknownQueryId(s.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredefinedParams {
    /// Substring searched for in image file names and lfns.
    #[serde(default)]
    pub needle: Option<String>,
    #[serde(default)]
    pub dataset_id: Option<Id>,
}

/// Columns of `all_datasets`.
pub const DATASET_FIELDS: [&str; 5] = [
    "dataset_name",
    "dataset_id",
    "lfn",
    "owner",
    "creation_date",
];

fn image_select() -> String {
    let cols: Vec<String> = DEFAULT_FIELDS
        .iter()
        .map(|(name, expr)| {
            let expr = if *name == "assessment_type" {
                "d.name"
            } else {
                expr
            };
            format!("{expr} AS {name}")
        })
        .collect();
    format!(
        "SELECT {} FROM imagefile AS i JOIN dataset AS d ON d.id = i.dataset_id",
        cols.join(", ")
    )
}

pub fn compile(
    query: PredefinedQuery,
    params: &PredefinedParams,
) -> Result<CompiledQuery, QueryError> {
    let image_columns = || {
        DEFAULT_FIELDS
            .iter()
            .map(|(n, _)| n.to_string())
            .collect::<Vec<_>>()
    };
    let needle = || match params.needle.as_deref() {
        Some(n) if !n.is_empty() => Ok(n.to_string()),
        _ => Err(QueryError::MissingParam("needle".into())),
    };
    let search = "(instr(i.file_name, ?) > 0 OR instr(i.lfn, ?) > 0)";
    Ok(match query {
        PredefinedQuery::AllDatasets => CompiledQuery {
            sql_text: "SELECT d.name AS dataset_name, d.id AS dataset_id, d.root_lfn AS lfn, \
                       d.owner AS owner, d.created_on AS creation_date FROM dataset AS d ORDER BY d.id"
                .into(),
            bindings: vec![],
            columns: DATASET_FIELDS.iter().map(|s| s.to_string()).collect(),
        },
        PredefinedQuery::AllImagefiles => CompiledQuery {
            sql_text: format!("{} ORDER BY i.lfn", image_select()),
            bindings: vec![],
            columns: image_columns(),
        },
        PredefinedQuery::SearchImagefiles => {
            let n = needle()?;
            CompiledQuery {
                sql_text: format!("{} WHERE {search} ORDER BY i.lfn", image_select()),
                bindings: vec![SqlValue::Text(n.clone()), SqlValue::Text(n)],
                columns: image_columns(),
            }
        }
        PredefinedQuery::SearchImagefilesInDataset => {
            let n = needle()?;
            let ds = params
                .dataset_id
                .ok_or_else(|| QueryError::MissingParam("dataset_id".into()))?;
            CompiledQuery {
                sql_text: format!("{} WHERE i.dataset_id = ? AND {search} ORDER BY i.lfn", image_select()),
                bindings: vec![SqlValue::Int(ds), SqlValue::Text(n.clone()), SqlValue::Text(n)],
                columns: image_columns(),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for q in PredefinedQuery::ALL {
            assert_eq!(q.id().parse::<PredefinedQuery>().unwrap(), q);
        }
        assert!(matches!(
            "bogus".parse::<PredefinedQuery>(),
            Err(QueryError::UnknownQueryId(_))
        ));
    }

    #[test]
    fn search_needs_needle_and_dataset() {
        let empty = PredefinedParams::default();
        assert!(matches!(
            compile(PredefinedQuery::SearchImagefiles, &empty),
            Err(QueryError::MissingParam(p)) if p == "needle"
        ));
        let needle_only = PredefinedParams {
            needle: Some("MPR1".into()),
            dataset_id: None,
        };
        assert!(matches!(
            compile(PredefinedQuery::SearchImagefilesInDataset, &needle_only),
            Err(QueryError::MissingParam(p)) if p == "dataset_id"
        ));
        let q = compile(PredefinedQuery::SearchImagefiles, &needle_only).unwrap();
        assert_eq!(q.placeholder_count(), q.bindings.len());
    }
}
