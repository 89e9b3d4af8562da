//! Dataset directory crawling and layout detection.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLINICAL_DIR: &str = "CLINICAL_VARIABLES";
pub const IMAGES_DIR: &str = "IMAGES";
pub const DEFAULT_MAX_DEPTH: usize = 32;

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error("path not found: {0}")]
    PathNotFound(PathBuf),
    #[error("permission denied: {0}")]
    PermissionDenied(PathBuf),
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("dataset tree has no {CLINICAL_DIR} directory")]
    MissingClinicalDir,
    #[error("dataset tree has no {IMAGES_DIR} directory")]
    MissingImagesDir,
    #[error("subject directories appear at mixed depths {0:?} under {IMAGES_DIR}")]
    AmbiguousDepth(Vec<usize>),
    #[error("subject directories at depth {0}; only 1 to 3 sub-levels are supported")]
    UnsupportedDepth(usize),
    #[error("empty directory tree")]
    EmptyTree,
}

impl CrawlError {
    fn from_io(path: &Path, source: io::Error) -> Self {
        match source.kind() {
            io::ErrorKind::NotFound => CrawlError::PathNotFound(path.to_path_buf()),
            io::ErrorKind::PermissionDenied => CrawlError::PermissionDenied(path.to_path_buf()),
            _ => CrawlError::Io {
                path: path.to_path_buf(),
                source,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Dir,
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirNode {
    pub name: String,
    pub kind: NodeKind,
    pub size_bytes: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<DirNode>,
}

impl DirNode {
    pub fn is_dir(&self) -> bool {
        self.kind == NodeKind::Dir
    }

    pub fn child(&self, name: &str) -> Option<&DirNode> {
        self.children.iter().find(|c| c.name == name)
    }

    fn child_matching(&self, name: &str, case_insensitive: bool) -> Option<&DirNode> {
        self.children.iter().filter(|c| c.is_dir()).find(|c| {
            if case_insensitive {
                c.name.eq_ignore_ascii_case(name)
            } else {
                c.name == name
            }
        })
    }

    /// Number of nodes in this subtree, including `self`.
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(DirNode::node_count).sum::<usize>()
    }

    pub fn file_count(&self) -> usize {
        match self.kind {
            NodeKind::File => 1,
            NodeKind::Dir => self.children.iter().map(DirNode::file_count).sum(),
        }
    }

    /// Walks the subtree, yielding each file with its path relative to `self`.
    pub fn files(&self) -> Vec<(String, &DirNode)> {
        let mut out = Vec::new();
        self.collect_files("", &mut out);
        out
    }

    fn collect_files<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a DirNode)>) {
        for c in &self.children {
            let path = join_rel(prefix, &c.name);
            match c.kind {
                NodeKind::File => out.push((path, c)),
                NodeKind::Dir => c.collect_files(&path, out),
            }
        }
    }
}

fn join_rel(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// In-memory snapshot of a directory tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryTree {
    pub root_path: String,
    pub max_depth: usize,
    /// Set when some directory below `max_depth` was not descended into.
    pub truncated: bool,
    pub root: DirNode,
}

impl DirectoryTree {
    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialization cannot fail")
    }

    /// Find a node by a `/`-separated path relative to the root.
    pub fn find(&self, rel: &str) -> Option<&DirNode> {
        rel.split('/')
            .filter(|s| !s.is_empty())
            .try_fold(&self.root, |node, seg| node.child(seg))
    }
}

/// Recursively snapshot `root`. Children are sorted by name; symlinks are skipped.
pub fn crawl(root: &Path, max_depth: usize) -> Result<DirectoryTree, CrawlError> {
    let meta = fs::metadata(root).map_err(|e| CrawlError::from_io(root, e))?;
    if !meta.is_dir() {
        return Err(CrawlError::NotADirectory(root.to_path_buf()));
    }
    let mut truncated = false;
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let node = crawl_dir(root, name, 0, max_depth, &mut truncated)?;
    Ok(DirectoryTree {
        root_path: root.to_string_lossy().into_owned(),
        max_depth,
        truncated,
        root: node,
    })
}

fn crawl_dir(
    path: &Path,
    name: String,
    depth: usize,
    max_depth: usize,
    truncated: &mut bool,
) -> Result<DirNode, CrawlError> {
    let mut node = DirNode {
        name,
        kind: NodeKind::Dir,
        size_bytes: 0,
        children: Vec::new(),
    };
    let mut entries = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| CrawlError::from_io(path, e))? {
        let entry = entry.map_err(|e| CrawlError::from_io(path, e))?;
        entries.push(entry);
    }
    entries.sort_by_key(|e| e.file_name());

    for entry in entries {
        let child_path = entry.path();
        let child_name = entry.file_name().to_string_lossy().into_owned();
        let ft = entry
            .file_type()
            .map_err(|e| CrawlError::from_io(&child_path, e))?;
        if ft.is_symlink() {
            continue;
        }
        if ft.is_dir() {
            if depth + 1 > max_depth {
                *truncated = true;
                continue;
            }
            node.children.push(crawl_dir(
                &child_path,
                child_name,
                depth + 1,
                max_depth,
                truncated,
            )?);
        } else if ft.is_file() {
            if depth + 1 > max_depth {
                *truncated = true;
                continue;
            }
            let size = entry
                .metadata()
                .map_err(|e| CrawlError::from_io(&child_path, e))?
                .len();
            node.children.push(DirNode {
                name: child_name,
                kind: NodeKind::File,
                size_bytes: size,
                children: Vec::new(),
            });
        }
    }
    node.size_bytes = node.children.iter().map(|c| c.size_bytes).sum();
    Ok(node)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    /// Name of the clinical directory as found in the tree.
    pub clinical_dir: String,
    pub images_dir: String,
    pub sub_levels: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LayoutOptions {
    pub case_insensitive_dirs: bool,
}

/// Locate the clinical and image subtrees and measure how deep subject directories sit.
///
/// Subject directories are directories without subdirectories. An empty
/// `IMAGES` directory is reported as one sub-level.
pub fn detect_layout(
    tree: &DirectoryTree,
    opts: LayoutOptions,
) -> Result<LayoutDescriptor, CrawlError> {
    let root = &tree.root;
    if !root.is_dir() {
        return Err(CrawlError::EmptyTree);
    }
    let clinical = root
        .child_matching(CLINICAL_DIR, opts.case_insensitive_dirs)
        .ok_or(CrawlError::MissingClinicalDir)?;
    let images = root
        .child_matching(IMAGES_DIR, opts.case_insensitive_dirs)
        .ok_or(CrawlError::MissingImagesDir)?;

    let mut depths = Vec::new();
    for child in images.children.iter().filter(|c| c.is_dir()) {
        leaf_depths(child, 1, &mut depths);
    }
    depths.sort_unstable();
    depths.dedup();
    let sub_levels = match depths.as_slice() {
        [] => 1,
        [d] => *d,
        _ => return Err(CrawlError::AmbiguousDepth(depths)),
    };
    if !(1..=3).contains(&sub_levels) {
        return Err(CrawlError::UnsupportedDepth(sub_levels));
    }
    Ok(LayoutDescriptor {
        clinical_dir: clinical.name.clone(),
        images_dir: images.name.clone(),
        sub_levels,
    })
}

fn leaf_depths(node: &DirNode, depth: usize, out: &mut Vec<usize>) {
    let subdirs: Vec<&DirNode> = node.children.iter().filter(|c| c.is_dir()).collect();
    if subdirs.is_empty() {
        out.push(depth);
    } else {
        for d in subdirs {
            leaf_depths(d, depth + 1, out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectDirectory {
    pub dir_name: String,
    /// Path between `IMAGES` and the subject directory, e.g. `phase1/CENTRE0003`.
    pub intermediate_path: String,
    pub file_names: Vec<String>,
}

impl SubjectDirectory {
    /// Path of the subject directory relative to `IMAGES`.
    pub fn rel_path(&self) -> String {
        join_rel(&self.intermediate_path, &self.dir_name)
    }
}

pub fn subject_directories(
    tree: &DirectoryTree,
    layout: &LayoutDescriptor,
) -> Vec<SubjectDirectory> {
    let Some(images) = tree.root.child(&layout.images_dir) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    collect_subjects(images, "", 0, layout.sub_levels, &mut out);
    out
}

fn collect_subjects(
    node: &DirNode,
    prefix: &str,
    depth: usize,
    sub_levels: usize,
    out: &mut Vec<SubjectDirectory>,
) {
    for child in node.children.iter().filter(|c| c.is_dir()) {
        if depth + 1 == sub_levels {
            out.push(SubjectDirectory {
                dir_name: child.name.clone(),
                intermediate_path: prefix.to_string(),
                file_names: child
                    .children
                    .iter()
                    .filter(|c| !c.is_dir())
                    .map(|c| c.name.clone())
                    .collect(),
            });
        } else {
            collect_subjects(
                child,
                &join_rel(prefix, &child.name),
                depth + 1,
                sub_levels,
                out,
            );
        }
    }
}
