//! On-disk persistence for one node.
//!
//! A data directory holds three files:
//!
//! ```text
//! log.bin     append-only records: u32 len, u8 kind, body, u32 crc32(kind ++ body)
//!             kind 1 entry:    u64 index, u64 packed EpochTerm, u64 origin cluster,
//!                              u8 payload tag, payload JSON
//!             kind 2 truncate: u64 first removed index
//!             kind 3 reset:    u64 index, u64 packed EpochTerm, u64 chain
//! meta.bin    append-only records: u32 len, JSON {current, voted_for, commit_index}, u32 crc32
//! base.snap   snapshot of the state at the log base (see `snapshot`)
//! history.json
//! ```
//!
//! Replay stops at the first torn or corrupt record and cuts the file there.

use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId};
use crate::log::{Entry, Log, LogBase, Payload};
use crate::node::{Durable, LogEvent, Node};
use crate::recovery::ReconfigHistory;
use crate::snapshot::{Snapshot, SnapshotError};
use serde::{Deserialize, Serialize};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const KIND_ENTRY: u8 = 1;
const KIND_TRUNCATE: u8 = 2;
const KIND_RESET: u8 = 3;

const TAG_NOOP: u8 = 0;
const TAG_COMMAND: u8 = 1;
const TAG_CONFIG: u8 = 2;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad record: {0}")]
    Record(String),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    current: EpochTerm,
    voted_for: Option<NodeId>,
    commit_index: u64,
    #[serde(default)]
    joined: bool,
}

pub struct FileStore {
    dir: PathBuf,
    log: File,
    meta: File,
    history: ReconfigHistory,
    sync: bool,
}

fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_be_bytes());
    out
}

/// Splits `bytes` into valid framed bodies; returns them and the length of the valid prefix.
fn unframe(bytes: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 4 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let end = pos + 4 + len + 4;
        if end > bytes.len() {
            break;
        }
        let body = &bytes[pos + 4..pos + 4 + len];
        let crc = u32::from_be_bytes(bytes[end - 4..end].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            break;
        }
        out.push(body);
        pos = end;
    }
    (out, pos)
}

fn encode_entry(e: &Entry) -> Vec<u8> {
    let mut b = vec![KIND_ENTRY];
    b.extend_from_slice(&e.index.to_be_bytes());
    b.extend_from_slice(&e.at.pack().to_be_bytes());
    b.extend_from_slice(&e.cluster.0.to_be_bytes());
    let (tag, payload) = match &e.payload {
        Payload::Noop => (TAG_NOOP, Vec::new()),
        Payload::Command(c) => (TAG_COMMAND, serde_json::to_vec(c).expect("serializable")),
        Payload::Config(c) => (TAG_CONFIG, serde_json::to_vec(c).expect("serializable")),
    };
    b.push(tag);
    b.extend_from_slice(&payload);
    b
}

fn u64_at(b: &[u8], at: usize) -> Result<u64, StorageError> {
    b.get(at..at + 8)
        .map(|s| u64::from_be_bytes(s.try_into().expect("8 bytes")))
        .ok_or_else(|| StorageError::Record("short record".into()))
}

enum Record {
    Entry(Entry),
    Truncate(u64),
    Reset(LogBase),
}

fn decode_record(b: &[u8]) -> Result<Record, StorageError> {
    let bad = |m: &str| StorageError::Record(m.to_string());
    match b.first() {
        Some(&KIND_ENTRY) => {
            let index = u64_at(b, 1)?;
            let at = EpochTerm::unpack(u64_at(b, 9)?);
            let cluster = ClusterId(u64_at(b, 17)?);
            let tag = *b.get(25).ok_or_else(|| bad("missing tag"))?;
            let body = &b[26..];
            let payload = match tag {
                TAG_NOOP => Payload::Noop,
                TAG_COMMAND => Payload::Command(serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?),
                TAG_CONFIG => Payload::Config(serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?),
                t => return Err(bad(&format!("unknown payload tag {t}"))),
            };
            Ok(Record::Entry(Entry { index, at, cluster, payload, chain: 0 }))
        }
        Some(&KIND_TRUNCATE) => Ok(Record::Truncate(u64_at(b, 1)?)),
        Some(&KIND_RESET) => Ok(Record::Reset(LogBase {
            index: u64_at(b, 1)?,
            at: EpochTerm::unpack(u64_at(b, 9)?),
            chain: u64_at(b, 17)?,
        })),
        _ => Err(bad("unknown record kind")),
    }
}

fn reset_record(base: LogBase) -> Vec<u8> {
    let mut b = vec![KIND_RESET];
    b.extend_from_slice(&base.index.to_be_bytes());
    b.extend_from_slice(&base.at.pack().to_be_bytes());
    b.extend_from_slice(&base.chain.to_be_bytes());
    b
}

/// Reads a framed file, cutting off a torn tail.
fn read_frames(path: &Path) -> Result<Vec<Vec<u8>>, StorageError> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }
    let (bodies, valid) = unframe(&bytes);
    let bodies = bodies.into_iter().map(|b| b.to_vec()).collect();
    if valid < bytes.len() {
        OpenOptions::new().write(true).open(path)?.set_len(valid as u64)?;
    }
    Ok(bodies)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

impl FileStore {
    /// Opens `dir`, returning the store and any state found in it.
    pub fn open(dir: impl AsRef<Path>, sync: bool) -> Result<(FileStore, Option<Durable>), StorageError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log_path = dir.join("log.bin");
        let meta_path = dir.join("meta.bin");
        let fresh = !log_path.exists() && !meta_path.exists();
        let durable = if fresh { None } else { Some(Self::load(&dir)?) };
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let meta = OpenOptions::new().create(true).append(true).open(&meta_path)?;
        let history = durable.as_ref().map(|d| d.history.clone()).unwrap_or_default();
        Ok((FileStore { dir, log, meta, history, sync }, durable))
    }

    fn load(dir: &Path) -> Result<Durable, StorageError> {
        let mut d = Durable::default();
        if let Ok(bytes) = fs::read(dir.join("base.snap")) {
            let snap = Snapshot::decode(&bytes)?;
            d.base_config = Some(snap.config);
            d.base_kv = snap.kv;
            d.log = Log::with_base(snap.last_included);
        }
        for body in read_frames(&dir.join("log.bin"))? {
            match decode_record(&body)? {
                Record::Entry(e) => {
                    if e.index <= d.log.base().index {
                        continue;
                    }
                    if e.index <= d.log.last_index() {
                        d.log.truncate_from(e.index);
                    }
                    if e.index == d.log.last_index() + 1 {
                        d.log.push_entry(e);
                    }
                }
                Record::Truncate(from) => {
                    if from > d.log.base().index {
                        d.log.truncate_from(from);
                    }
                }
                Record::Reset(base) => {
                    if base.index >= d.log.base().index {
                        d.log.reset(base);
                    }
                }
            }
        }
        if let Some(body) = read_frames(&dir.join("meta.bin"))?.last() {
            let m: Meta = serde_json::from_slice(body).map_err(|e| StorageError::Record(e.to_string()))?;
            d.current = m.current;
            d.voted_for = m.voted_for;
            d.commit_index = m.commit_index.min(d.log.last_index()).max(d.log.base().index);
            d.joined = m.joined;
        }
        if let Ok(bytes) = fs::read(dir.join("history.json")) {
            d.history = serde_json::from_slice(&bytes).map_err(|e| StorageError::Record(e.to_string()))?;
        }
        Ok(d)
    }

    /// Writes a node's initial state.
    pub fn init(&mut self, d: &Durable) -> Result<(), StorageError> {
        self.write_base(d)?;
        self.log.set_len(0)?;
        self.log.write_all(&frame(&reset_record(d.log.base())))?;
        for e in d.log.entries() {
            self.log.write_all(&frame(&encode_entry(e)))?;
        }
        self.write_meta(d)?;
        self.write_history(&d.history)?;
        self.flush()
    }

    fn write_base(&self, d: &Durable) -> Result<(), StorageError> {
        if let Some(config) = &d.base_config {
            let snap = Snapshot {
                source_cluster: config.cluster,
                last_included: d.log.base(),
                config: config.clone(),
                kv: d.base_kv.clone(),
            };
            write_atomic(&self.dir.join("base.snap"), &snap.encode())?;
        }
        Ok(())
    }

    fn write_meta(&mut self, d: &Durable) -> Result<(), StorageError> {
        let m = Meta { current: d.current, voted_for: d.voted_for, commit_index: d.commit_index, joined: d.joined };
        self.meta.write_all(&frame(&serde_json::to_vec(&m).expect("serializable")))?;
        Ok(())
    }

    fn write_history(&mut self, h: &ReconfigHistory) -> Result<(), StorageError> {
        write_atomic(&self.dir.join("history.json"), &serde_json::to_vec(h).expect("serializable"))?;
        self.history = h.clone();
        Ok(())
    }

    fn flush(&mut self) -> Result<(), StorageError> {
        if self.sync {
            self.log.sync_data()?;
            self.meta.sync_data()?;
        }
        Ok(())
    }

    /// Persists whatever the node changed since the last call. The node
    /// must have log-event recording switched on.
    pub fn persist(&mut self, node: &mut Node) -> Result<(), StorageError> {
        let events = node.take_log_events();
        let meta = node.take_meta_dirty();
        if events.is_empty() && !meta && node.history() == &self.history {
            return Ok(());
        }
        for ev in events {
            match ev {
                LogEvent::Append(e) => self.log.write_all(&frame(&encode_entry(&e)))?,
                LogEvent::Truncate(from) => {
                    let mut b = vec![KIND_TRUNCATE];
                    b.extend_from_slice(&from.to_be_bytes());
                    self.log.write_all(&frame(&b))?;
                }
                LogEvent::Reset(base) => {
                    self.write_base(node.durable())?;
                    self.log.set_len(0)?;
                    self.log.write_all(&frame(&reset_record(base)))?;
                    for e in node.log().entries() {
                        self.log.write_all(&frame(&encode_entry(e)))?;
                    }
                }
            }
        }
        if meta {
            self.write_meta(node.durable())?;
        }
        if node.history() != &self.history {
            let h = node.history().clone();
            self.write_history(&h)?;
        }
        self.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ClusterConfig;
    use crate::ids::nodes;
    use crate::kv::{ClientId, Command, KvOp};
    use crate::node::NodeOptions;
    use crate::range::KeyRange;

    fn durable() -> Durable {
        let config = ClusterConfig::bootstrap(ClusterId(1), nodes(1..=3), KeyRange::full());
        let mut d = Durable {
            base_kv: crate::kv::KvStore::new(config.range.clone()),
            base_config: Some(config),
            ..Durable::default()
        };
        for i in 0..5u64 {
            let cmd = Command {
                client: ClientId(1),
                seq: i,
                op: KvOp::Put { key: format!("k{i}").into(), value: "v".into() },
            };
            d.log.push(EpochTerm::new(0, 1), ClusterId(1), Payload::Command(cmd));
        }
        d.current = EpochTerm::new(0, 1);
        d.commit_index = 3;
        d
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = durable();
        let (mut store, found) = FileStore::open(dir.path(), false).unwrap();
        assert!(found.is_none());
        store.init(&d).unwrap();
        drop(store);
        let (_, found) = FileStore::open(dir.path(), false).unwrap();
        assert_eq!(found.unwrap(), d);
    }

    #[test]
    fn torn_tail_is_cut() {
        let dir = tempfile::tempdir().unwrap();
        let d = durable();
        let (mut store, _) = FileStore::open(dir.path(), false).unwrap();
        store.init(&d).unwrap();
        drop(store);
        let path = dir.path().join("log.bin");
        let len = fs::metadata(&path).unwrap().len();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 3).unwrap();
        let (_, found) = FileStore::open(dir.path(), false).unwrap();
        let found = found.unwrap();
        assert_eq!(found.log.last_index(), 4);
        assert_eq!(found.commit_index, 3);
        assert!(fs::metadata(&path).unwrap().len() < len - 3);
    }

    #[test]
    fn persists_node_changes() {
        let dir = tempfile::tempdir().unwrap();
        let config = ClusterConfig::bootstrap(ClusterId(1), nodes([1]), KeyRange::full());
        let mut node = Node::bootstrap(NodeId(1), config, NodeOptions::default(), 1);
        node.record_log_events(true);
        let (mut store, _) = FileStore::open(dir.path(), false).unwrap();
        store.init(node.durable()).unwrap();
        node.campaign_now(0);
        let cmd = Command { client: ClientId(9), seq: 1, op: KvOp::Put { key: "a".into(), value: "1".into() } };
        node.step(1, crate::node::Input::Client { id: 1, cmd });
        store.persist(&mut node).unwrap();
        drop(store);
        let (_, found) = FileStore::open(dir.path(), false).unwrap();
        let found = found.unwrap();
        assert_eq!(&found, node.durable());
        let restored = Node::from_durable(NodeId(1), found, NodeOptions::default(), 1);
        assert_eq!(restored.kv().data, node.kv().data);
    }
}
