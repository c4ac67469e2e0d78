//! Simulation traces and their digests.
//!
//! A trace is written as JSON lines: one header, then one line per event,
//! then one line per node with its final state.

use crate::scenario::OpSpec;
use recraft_core::epoch::EpochTerm;
use recraft_core::ids::{ClusterId, NodeId};
use recraft_core::kv::KvResult;
use recraft_core::log::LogBase;
use recraft_core::node::{Input, NodeStatus, Output};
use recraft_core::observe::Observation;
use recraft_core::range::Key;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Virtual time in microseconds.
    pub time: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    /// A node consumed one input.
    Step {
        input: Input,
        outputs: Vec<Output>,
        digest: u64,
    },
    Crash,
    Restart,
    FaultStart {
        fault: usize,
        what: String,
    },
    FaultEnd {
        fault: usize,
    },
    /// A scripted operation was handed to a client or operator.
    OpIssued {
        op: usize,
        spec: OpSpec,
    },
    /// An attempt of a scripted operation reached `node`.
    OpSent {
        op: usize,
    },
    /// A scripted operation got its final answer.
    OpDone {
        op: usize,
        ok: bool,
        outcome: String,
        result: Option<KvResult>,
    },
    /// The run hit the simulator's event budget and stopped early.
    Halted {
        pending: usize,
    },
    /// A newly elected leader's log at the highest index known to be
    /// applied in its cluster and epoch.
    LeaderProbe {
        cluster: ClusterId,
        epoch: u32,
        index: u64,
        chain: Option<u64>,
        compacted: bool,
    },
}

/// One node's state when the run ended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalNode {
    pub status: NodeStatus,
    pub up: bool,
    pub base: LogBase,
    pub entries: Vec<EntrySummary>,
    pub kv: BTreeMap<Key, Key>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub index: u64,
    pub at: EpochTerm,
    pub origin: ClusterId,
    pub chain: u64,
    pub config: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub scenario: String,
    pub seed: u64,
    pub horizon: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "line", rename_all = "snake_case")]
enum Line {
    Header(TraceHeader),
    Event(TraceEvent),
    Final(FinalNode),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub header: Option<TraceHeader>,
    pub events: Vec<TraceEvent>,
    pub finals: Vec<FinalNode>,
}

/// Hashes whatever is written to it.
struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Trace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut line = |l: &Line| -> io::Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")
        };
        if let Some(h) = &self.header {
            line(&Line::Header(h.clone()))?;
        }
        for e in &self.events {
            line(&Line::Event(e.clone()))?;
        }
        for f in &self.finals {
            line(&Line::Final(f.clone()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Trace> {
        let mut t = Trace::default();
        for l in r.lines() {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&l).map_err(io::Error::other)? {
                Line::Header(h) => t.header = Some(h),
                Line::Event(e) => t.events.push(e),
                Line::Final(f) => t.finals.push(f),
            }
        }
        Ok(t)
    }

    /// SHA-256 of the JSON-lines encoding, in hex.
    pub fn digest(&self) -> String {
        let mut h = HashWriter(Sha256::new());
        self.write_jsonl(&mut h).expect("hashing cannot fail");
        h.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every observation in trace order, with its event index.
    pub fn observations(&self) -> impl Iterator<Item = (usize, &TraceEvent, &Observation)> {
        self.events.iter().enumerate().flat_map(|(i, e)| {
            let outs: &[Output] = match &e.kind {
                EventKind::Step { outputs, .. } => outputs,
                _ => &[],
            };
            outs.iter().filter_map(move |o| match o {
                Output::Observe { obs } => Some((i, e, obs)),
                _ => None,
            })
        })
    }

    pub fn horizon(&self) -> u64 {
        self.header.as_ref().map(|h| h.horizon).unwrap_or_else(|| self.events.last().map_or(0, |e| e.time))
    }
}
