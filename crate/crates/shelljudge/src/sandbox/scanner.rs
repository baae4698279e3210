//! Mounted-home scanner: snapshot a tree before and after a run and diff the
//! two. Container runtimes do not track changes to mounted filesystems, so
//! this is the only source of truth for the home delta.
//!
//! `Changed` is decided by content digest, size, mode or node kind — never by
//! mtime alone, which would flag files a candidate merely read (atime) or
//! touched without modifying.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ChangeKind, FsChange};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    File,
    Dir,
    Symlink,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileSig {
    pub kind: NodeKind,
    pub size: u64,
    pub mode: u32,
    /// Seconds since the epoch; recorded for forensics, excluded from the
    /// change decision.
    pub mtime_s: i64,
    /// Content digest for files, target digest for symlinks, None for dirs.
    pub digest: Option<String>,
}

impl FileSig {
    /// The bytes that participate in identity comparisons and tree checksums.
    pub fn identity_bytes(&self) -> Vec<u8> {
        format!(
            "{:?}|{}|{:o}|{}",
            self.kind,
            self.size,
            self.mode,
            self.digest.as_deref().unwrap_or("-")
        )
        .into_bytes()
    }

    fn same_content(&self, other: &FileSig) -> bool {
        self.kind == other.kind
            && self.mode == other.mode
            && (self.kind == NodeKind::Dir
                || (self.size == other.size && self.digest == other.digest))
    }
}

/// Relative path (forward slashes) → signature, sorted.
pub struct TreeSnapshot(BTreeMap<String, FileSig>);

impl TreeSnapshot {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &FileSig)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Snapshot every node under `root` (excluding the root itself).
pub fn snapshot_tree(root: &Path) -> io::Result<TreeSnapshot> {
    use std::os::unix::fs::MetadataExt;
    use std::os::unix::fs::PermissionsExt;

    let mut map = BTreeMap::new();
    if !root.exists() {
        return Ok(TreeSnapshot(map));
    }
    for entry in walkdir::WalkDir::new(root).min_depth(1).sort_by_file_name() {
        let entry = entry?;
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields paths under its root")
            .to_string_lossy()
            .replace('\\', "/");
        let meta = entry.path().symlink_metadata()?;
        let mode = meta.permissions().mode() & 0o7777;
        let sig = if meta.file_type().is_symlink() {
            let target = std::fs::read_link(entry.path())?;
            FileSig {
                kind: NodeKind::Symlink,
                size: 0,
                mode,
                mtime_s: meta.mtime(),
                digest: Some(hex::encode(Sha256::digest(
                    target.to_string_lossy().as_bytes(),
                ))),
            }
        } else if meta.is_dir() {
            FileSig {
                kind: NodeKind::Dir,
                size: 0,
                mode,
                mtime_s: meta.mtime(),
                digest: None,
            }
        } else {
            let content = std::fs::read(entry.path())?;
            FileSig {
                kind: NodeKind::File,
                size: meta.len(),
                mode,
                mtime_s: meta.mtime(),
                digest: Some(hex::encode(Sha256::digest(&content))),
            }
        };
        map.insert(rel, sig);
    }
    Ok(TreeSnapshot(map))
}

/// Diff two snapshots into a sorted change list.
pub fn tree_diff(before: &TreeSnapshot, after: &TreeSnapshot) -> Vec<FsChange> {
    let mut changes = Vec::new();
    for (path, sig) in after.iter() {
        match before.0.get(path) {
            None => changes.push(FsChange::new(ChangeKind::Added, path.clone())),
            Some(old) if !old.same_content(sig) => {
                changes.push(FsChange::new(ChangeKind::Changed, path.clone()))
            }
            Some(_) => {}
        }
    }
    for path in before.0.keys() {
        if !after.0.contains_key(path) {
            changes.push(FsChange::new(ChangeKind::Deleted, path.clone()));
        }
    }
    changes.sort();
    changes
}
