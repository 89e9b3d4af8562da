//! Neuroimaging data atlas engine.
//!
//! Indexes dataset trees (scan files plus clinical CSVs and data
//! dictionaries) into a relational catalog and answers filtered, paginated
//! queries over it, with XML/CSV export.

pub mod crawler;
pub mod export;
pub mod ingest;
pub mod model;
pub mod naming;
pub mod pipeline;
pub mod query;
pub mod store;
pub mod synth;
pub mod values;

pub use query::QueryEngine;
pub use store::Store;
