//! Raft with built-in split, merge and membership reconfiguration.

pub mod config;
pub mod epoch;
pub mod ids;
pub mod kv;
pub mod log;
pub mod membership;
pub mod message;
pub mod node;
pub mod observe;
pub mod quorum;
pub mod range;
pub mod recovery;
pub mod snapshot;
pub mod storage;

pub use config::{ClusterConfig, ConfigKind, SubCluster};
pub use epoch::EpochTerm;
pub use ids::{nodes, ClusterId, NodeId, NodeSet};
pub use quorum::QuorumRule;
pub use range::{Key, KeyRange};
