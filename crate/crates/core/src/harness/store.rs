//! Tagged snapshot storage plus the step-ordered training history.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{read_checkpoint, restore, write_checkpoint, PolicyParams, PolicySnapshot};

const CHECKPOINT_EXT: &str = "ckpt";

#[derive(Debug, Clone, Default)]
pub struct SnapshotStore {
    tagged: BTreeMap<String, PolicySnapshot>,
    history: Vec<PolicySnapshot>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tagged snapshot; tags are unique.
    pub fn insert(&mut self, snap: PolicySnapshot) -> Result<()> {
        if self.tagged.contains_key(snap.tag()) {
            return Err(Error::input(format!("snapshot tag `{}` already stored", snap.tag())));
        }
        self.tagged.insert(snap.tag().to_string(), snap);
        Ok(())
    }

    /// Adds or overwrites a tagged snapshot.
    pub fn replace(&mut self, snap: PolicySnapshot) {
        self.tagged.insert(snap.tag().to_string(), snap);
    }

    pub fn get(&self, tag: &str) -> Result<&PolicySnapshot> {
        self.tagged
            .get(tag)
            .ok_or_else(|| Error::SnapshotNotFound(tag.to_string()))
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tagged.contains_key(tag)
    }

    pub fn restore(&self, tag: &str) -> Result<PolicyParams> {
        self.get(tag).map(restore)
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.tagged.keys().map(String::as_str)
    }

    /// Fails on the first tag in `tags` that is not stored.
    pub fn require<'a>(&self, tags: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for tag in tags {
            self.get(tag)?;
        }
        Ok(())
    }

    /// Appends to the history; steps must not decrease.
    pub fn push_history(&mut self, snap: PolicySnapshot) -> Result<()> {
        if let Some(last) = self.history.last() {
            if snap.step() < last.step() {
                return Err(Error::input("history steps must be non-decreasing"));
            }
        }
        self.history.push(snap);
        Ok(())
    }

    pub fn history(&self) -> &[PolicySnapshot] {
        &self.history
    }

    pub fn history_at(&self, step: usize) -> Option<&PolicySnapshot> {
        self.history.iter().find(|s| s.step() == step)
    }

    /// Writes every tagged snapshot to `dir/<tag>.ckpt`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for snap in self.tagged.values() {
            let path = dir.join(format!("{}.{CHECKPOINT_EXT}", snap.tag()));
            fs::write(&path, write_checkpoint(snap)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads every `*.ckpt` in `dir`; a missing directory yields an empty store.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut store = Self::new();
        if !dir.is_dir() {
            return Ok(store);
        }
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXT))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            store.replace(read_checkpoint(&text)?);
        }
        Ok(store)
    }
}
