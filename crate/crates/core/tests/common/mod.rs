#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use atlas_core::ingest::{ingest_dataset, IngestOptions, IngestReport};
use atlas_core::synth::{generate, Manifest, SynthSpec};
use atlas_core::{QueryEngine, Store};
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub manifest: Manifest,
    pub store: Arc<Store>,
    pub engine: QueryEngine,
    pub report: IngestReport,
    pub root_lfn: String,
}

impl Fixture {
    pub fn tree(&self) -> PathBuf {
        self.dir.path().join("tree")
    }

    /// Expected lfns for manifest-relative paths.
    pub fn lfns(&self, rel: &[String]) -> Vec<String> {
        rel.iter()
            .map(|r| format!("{}/{r}", self.root_lfn))
            .collect()
    }
}

/// Generate `spec`, ingest it under its own dataset name, and open an engine.
pub fn fixture(spec: &SynthSpec) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("tree");
    let manifest = generate(spec, &tree).unwrap();
    let store = Arc::new(Store::open(dir.path().join("atlas.db")).unwrap());
    let opts = IngestOptions::new(manifest.dataset_name.clone(), manifest.dataset_name.clone());
    let report = ingest_dataset(&store, &tree, &opts).unwrap();
    Fixture {
        engine: QueryEngine::new(store.clone()),
        root_lfn: opts.root_lfn(),
        dir,
        manifest,
        store,
        report,
    }
}
