//! Reconfiguration history and the naming registry.
//!
//! Every node keeps a record of the splits, merges and membership changes it
//! took part in, outliving log compaction. A node that missed a
//! reconfiguration can then catch up from any peer that still holds the
//! record, and the naming registry is the fallback for finding such peers.

use crate::config::{ClusterConfig, TxId};
use crate::ids::{ClusterId, NodeId, NodeSet};
use crate::log::LogBase;
use crate::message::NamingEntry;
use crate::range::{Key, KeyRange};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKind {
    Split,
    Merge,
    Membership,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub kind: HistoryKind,
    pub epoch_before: u32,
    pub old: ClusterConfig,
    pub new: Vec<ClusterConfig>,
    /// Log position of the entry that completed the change.
    pub boundary: LogBase,
    pub tx: Option<TxId>,
    /// Encoded state at the boundary, for peers that can no longer be
    /// served from the log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Vec<u8>>,
    /// Involved nodes known to have completed the change.
    pub completed: NodeSet,
}

impl HistoryRecord {
    pub fn involved(&self) -> NodeSet {
        let mut all = self.old.members.clone();
        for c in &self.new {
            all.extend(c.members.iter().copied());
        }
        all
    }

    pub fn is_settled(&self) -> bool {
        self.involved().is_subset(&self.completed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfigHistory {
    records: Vec<HistoryRecord>,
}

impl ReconfigHistory {
    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    /// Adds a record unless one for the same boundary already exists.
    pub fn push(&mut self, record: HistoryRecord) {
        let dup = self.records.iter().any(|r| {
            r.old.cluster == record.old.cluster
                && r.epoch_before == record.epoch_before
                && r.kind == record.kind
                && r.old.version == record.old.version
        });
        if !dup {
            self.records.push(record);
        }
    }

    /// The epoch-changing record that retired `cluster` at `epoch`.
    pub fn successor_of(&self, cluster: ClusterId, epoch: u32) -> Option<&HistoryRecord> {
        self.records
            .iter()
            .find(|r| r.kind != HistoryKind::Membership && r.old.cluster == cluster && r.old.epoch == epoch)
    }

    pub fn merge_record(&self, tx: TxId) -> Option<&HistoryRecord> {
        self.records.iter().find(|r| r.tx == Some(tx))
    }

    pub fn mark_completed(&mut self, cluster: ClusterId, epoch: u32, node: NodeId) {
        for r in &mut self.records {
            if r.old.cluster == cluster && r.old.epoch == epoch {
                r.completed.insert(node);
            }
        }
    }

    /// Drops settled records; merge records keep their snapshots for peers
    /// that have not fetched them, so only membership and split records go.
    pub fn collect_garbage(&mut self) -> usize {
        let before = self.records.len();
        self.records.retain(|r| r.kind == HistoryKind::Merge || !r.is_settled());
        before - self.records.len()
    }
}

/// Loosely consistent directory of live clusters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingRegistry {
    entries: BTreeMap<ClusterId, NamingEntry>,
}

impl NamingRegistry {
    /// Records `entry` unless a newer epoch of the same cluster is known.
    pub fn register(&mut self, entry: NamingEntry) {
        if self.entries.get(&entry.cluster).is_some_and(|e| e.epoch > entry.epoch) {
            return;
        }
        self.entries.insert(entry.cluster, entry);
    }

    /// The newest-epoch cluster whose range holds `key`.
    pub fn owner(&self, key: &Key) -> Option<&NamingEntry> {
        self.entries.values().filter(|e| e.range.contains(key)).max_by_key(|e| (e.epoch, e.cluster))
    }

    pub fn get(&self, cluster: ClusterId) -> Option<&NamingEntry> {
        self.entries.get(&cluster)
    }

    pub fn list(&self) -> impl Iterator<Item = &NamingEntry> {
        self.entries.values()
    }

    /// Every cluster whose range intersects `range`.
    pub fn lookup_range(&self, range: &KeyRange) -> Vec<NamingEntry> {
        self.entries.values().filter(|e| e.range.intersects(range)).cloned().collect()
    }
}

/// A registry persisted as a single JSON file.
#[derive(Debug)]
pub struct FileRegistry {
    path: PathBuf,
    inner: NamingRegistry,
}

impl FileRegistry {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let inner = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(io::Error::other)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => NamingRegistry::default(),
            Err(e) => return Err(e),
        };
        Ok(FileRegistry { path, inner })
    }

    pub fn registry(&self) -> &NamingRegistry {
        &self.inner
    }

    pub fn register(&mut self, entry: NamingEntry) -> io::Result<()> {
        self.inner.register(entry);
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.inner).map_err(io::Error::other)?)?;
        std::fs::rename(tmp, &self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epoch::EpochTerm;
    use crate::ids::nodes;

    fn entry(c: u64, members: NodeSet, range: &str, epoch: u32) -> NamingEntry {
        NamingEntry { cluster: ClusterId(c), members, range: range.parse().unwrap(), epoch }
    }

    #[test]
    fn lookup_after_split() {
        let mut reg = NamingRegistry::default();
        reg.register(entry(1, nodes(1..=6), "a:z", 0));
        reg.register(entry(2, nodes(1..=3), "a:m", 1));
        reg.register(entry(3, nodes(4..=6), "m:z", 1));
        let hits: Vec<u64> = reg.lookup_range(&"a:z".parse().unwrap()).iter().map(|e| e.cluster.0).collect();
        // The retired parent stays until something overwrites it.
        assert_eq!(hits, vec![1, 2, 3]);
        let hits: Vec<u64> = reg.lookup_range(&"n:o".parse().unwrap()).iter().map(|e| e.cluster.0).collect();
        assert_eq!(hits, vec![1, 3]);
    }

    #[test]
    fn file_registry_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("naming.json");
        let mut reg = FileRegistry::open(&path).unwrap();
        reg.register(entry(7, nodes([1]), "a:b", 2)).unwrap();
        let again = FileRegistry::open(&path).unwrap();
        assert_eq!(again.registry().get(ClusterId(7)).unwrap().epoch, 2);
    }

    #[test]
    fn history_gc_waits_for_every_node() {
        let old = ClusterConfig::bootstrap(ClusterId(1), nodes(1..=2), KeyRange::full());
        let mut h = ReconfigHistory::default();
        h.push(HistoryRecord {
            kind: HistoryKind::Split,
            epoch_before: 0,
            old: old.clone(),
            new: vec![],
            boundary: LogBase { index: 3, at: EpochTerm::new(0, 1), chain: 0 },
            tx: None,
            snapshot: None,
            completed: NodeSet::new(),
        });
        h.mark_completed(ClusterId(1), 0, NodeId(1));
        assert_eq!(h.collect_garbage(), 0);
        h.mark_completed(ClusterId(1), 0, NodeId(2));
        assert_eq!(h.collect_garbage(), 1);
    }
}
