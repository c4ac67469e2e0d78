//! State-machine snapshots and their file format.
//!
//! ```text
//! b"RCSN"                 magic
//! u16 big-endian          format version
//! u32 big-endian          header length
//! [u8]                    JSON header
//! records, sorted by key: u32 key length, key, u32 value length, value
//! ```
//!
//! The header holds the range, last included position, record count, a
//! CRC32 over the record section, the source cluster, the configuration at
//! the snapshot point and the client sessions.

use crate::config::ClusterConfig;
use crate::ids::ClusterId;
use crate::kv::{ClientId, KvStore, Session};
use crate::log::LogBase;
use crate::range::{Key, KeyRange};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"RCSN";
const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub source_cluster: ClusterId,
    pub last_included: LogBase,
    pub config: ClusterConfig,
    pub kv: KvStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    range: KeyRange,
    last_included: LogBase,
    count: u64,
    checksum: u32,
    source_cluster: ClusterId,
    config: ClusterConfig,
    sessions: Vec<(ClientId, Session)>,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file")]
    Magic,
    #[error("unsupported snapshot format {0}")]
    Version(u16),
    #[error("snapshot truncated")]
    Truncated,
    #[error("record checksum mismatch")]
    Checksum,
    #[error("record count mismatch: header {header}, found {found}")]
    Count { header: u64, found: u64 },
    #[error("key {0} outside snapshot range")]
    OutOfRange(String),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
}

impl Snapshot {
    pub fn encode(&self) -> Vec<u8> {
        let mut records = Vec::new();
        for (k, v) in &self.kv.data {
            records.extend_from_slice(&(k.0.len() as u32).to_be_bytes());
            records.extend_from_slice(&k.0);
            records.extend_from_slice(&(v.0.len() as u32).to_be_bytes());
            records.extend_from_slice(&v.0);
        }
        let header = Header {
            range: self.kv.range.clone(),
            last_included: self.last_included,
            count: self.kv.data.len() as u64,
            checksum: crc32fast::hash(&records),
            source_cluster: self.source_cluster,
            config: self.config.clone(),
            sessions: self.kv.sessions.iter().map(|(c, s)| (*c, s.clone())).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + header.len() + records.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
        out.extend_from_slice(&(header.len() as u32).to_be_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&records);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Snapshot, SnapshotError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(SnapshotError::Magic);
        }
        let version = u16::from_be_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(SnapshotError::Version(version));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let records = &bytes[r.pos..];
        if crc32fast::hash(records) != header.checksum {
            return Err(SnapshotError::Checksum);
        }
        let mut data = BTreeMap::new();
        while r.pos < bytes.len() {
            let klen = r.u32()? as usize;
            let k = Key(r.take(klen)?.to_vec());
            let vlen = r.u32()? as usize;
            let v = Key(r.take(vlen)?.to_vec());
            if !header.range.contains(&k) {
                return Err(SnapshotError::OutOfRange(k.to_string()));
            }
            data.insert(k, v);
        }
        if data.len() as u64 != header.count {
            return Err(SnapshotError::Count { header: header.count, found: data.len() as u64 });
        }
        Ok(Snapshot {
            source_cluster: header.source_cluster,
            last_included: header.last_included,
            config: header.config,
            kv: KvStore { range: header.range, data, sessions: header.sessions.into_iter().collect() },
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).ok_or(SnapshotError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(SnapshotError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Splits encoded bytes into transfer chunks of at most `size` bytes.
pub fn chunk(bytes: &[u8], offset: u64, size: usize) -> &[u8] {
    let start = (offset as usize).min(bytes.len());
    let end = start.saturating_add(size).min(bytes.len());
    &bytes[start..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epoch::EpochTerm;
    use crate::ids::nodes;
    use crate::kv::{Command, KvOp};

    fn sample(n: usize) -> Snapshot {
        let mut kv = KvStore::new("a:n".parse().unwrap());
        for i in 0..n {
            let cmd = Command {
                client: ClientId(1),
                seq: i as u64 + 1,
                op: KvOp::Put { key: format!("b{i:04}").into(), value: Key(vec![i as u8; 300]) },
            };
            kv.apply(&cmd);
        }
        Snapshot {
            source_cluster: ClusterId(4),
            last_included: LogBase { index: 7, at: EpochTerm::new(1, 2), chain: 99 },
            config: ClusterConfig::bootstrap(ClusterId(4), nodes(1..=3), "a:n".parse().unwrap()),
            kv,
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let s = sample(10);
        assert_eq!(Snapshot::decode(&s.encode()).unwrap(), s);
        let empty = sample(0);
        assert_eq!(Snapshot::decode(&empty.encode()).unwrap(), empty);
    }

    #[test]
    fn chunked_transfer_reassembles_identically() {
        let s = sample(500);
        let bytes = s.encode();
        assert!(bytes.len() > 64 * 1024);
        let mut got = Vec::new();
        while (got.len()) < bytes.len() {
            got.extend_from_slice(chunk(&bytes, got.len() as u64, 64 * 1024));
        }
        assert_eq!(crc32fast::hash(&got), crc32fast::hash(&bytes));
        assert_eq!(got, bytes);
        assert_eq!(Snapshot::decode(&got).unwrap(), s);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample(3).encode();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Snapshot::decode(&bytes), Err(SnapshotError::Checksum)));
        assert!(matches!(Snapshot::decode(b"nope"), Err(SnapshotError::Magic)));
    }
}
