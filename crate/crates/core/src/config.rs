//! Cluster configurations carried in the log.
//!
//! A configuration takes effect on a node as soon as the node appends it,
//! not when it commits. Split and merge steps are configuration entries too.

use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId, NodeSet};
use crate::quorum::QuorumRule;
use crate::range::KeyRange;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("configuration has no members")]
    NoMembers,
    #[error("a split needs at least two subclusters")]
    TooFewSubclusters,
    #[error("subclusters overlap on node {0}")]
    SubclusterOverlap(NodeId),
    #[error("subcluster members do not add up to the cluster")]
    SubclusterMembers,
    #[error("subcluster ranges overlap")]
    RangeOverlap,
    #[error("subcluster ranges do not add up to the cluster range")]
    RangeCoverage,
    #[error("subcluster {0} has no members")]
    EmptySubcluster(ClusterId),
    #[error("duplicate cluster id {0}")]
    DuplicateCluster(ClusterId),
    #[error("merge needs at least two participants")]
    TooFewParticipants,
    #[error("participant member sets overlap on node {0}")]
    ParticipantOverlap(NodeId),
    #[error("participant ranges overlap")]
    ParticipantRangeOverlap,
    #[error("resume members must include every member of at least one participant and nothing outside them")]
    BadResumeMembers,
    #[error("fixed quorum {quorum} out of range for {members} members")]
    BadQuorum { quorum: usize, members: usize },
}

/// One child of a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubCluster {
    pub cluster: ClusterId,
    pub members: NodeSet,
    pub range: KeyRange,
}

/// Identifies a merge transaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId {
    pub coordinator: ClusterId,
    pub at: EpochTerm,
    pub seq: u64,
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx-{}-{}-{}", self.coordinator.0, self.at, self.seq)
    }
}

/// A cluster taking part in a merge, as the coordinator saw it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub cluster: ClusterId,
    pub members: NodeSet,
    pub range: KeyRange,
}

/// Everything the participants agree on when a merge is proposed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub id: TxId,
    pub participants: Vec<Participant>,
    pub merged_cluster: ClusterId,
    /// Members of the merged cluster; `None` keeps every participant node.
    pub resume_members: Option<NodeSet>,
}

impl MergePlan {
    pub fn coordinator(&self) -> ClusterId {
        self.id.coordinator
    }

    pub fn participant(&self, cluster: ClusterId) -> Option<&Participant> {
        self.participants.iter().find(|p| p.cluster == cluster)
    }

    pub fn all_members(&self) -> NodeSet {
        self.participants.iter().flat_map(|p| p.members.iter().copied()).collect()
    }

    pub fn merged_members(&self) -> NodeSet {
        self.resume_members.clone().unwrap_or_else(|| self.all_members())
    }

    pub fn merged_range(&self) -> KeyRange {
        self.participants.iter().fold(KeyRange::empty(), |acc, p| acc.union(&p.range))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.participants.len() < 2 {
            return Err(ConfigError::TooFewParticipants);
        }
        let mut seen = NodeSet::new();
        let mut clusters = std::collections::BTreeSet::new();
        for p in &self.participants {
            if p.members.is_empty() {
                return Err(ConfigError::EmptySubcluster(p.cluster));
            }
            if !clusters.insert(p.cluster) {
                return Err(ConfigError::DuplicateCluster(p.cluster));
            }
            for n in &p.members {
                if !seen.insert(*n) {
                    return Err(ConfigError::ParticipantOverlap(*n));
                }
            }
        }
        for (i, a) in self.participants.iter().enumerate() {
            for b in &self.participants[i + 1..] {
                if a.range.intersects(&b.range) {
                    return Err(ConfigError::ParticipantRangeOverlap);
                }
            }
        }
        if let Some(resume) = &self.resume_members {
            let inside = resume.is_subset(&seen);
            let keeps_one = self.participants.iter().any(|p| p.members.is_subset(resume));
            if !inside || !keeps_one {
                return Err(ConfigError::BadResumeMembers);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Commit,
    Abort,
}

/// What a configuration entry does.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfigKind {
    /// Plain majority configuration.
    Stable,
    /// Membership step with an explicit quorum size. `final_members` is the
    /// member set once the whole change has finished.
    NewQ { quorum: usize, final_members: NodeSet },
    /// First split phase: elections need every subcluster, commits the old majority.
    SplitJoint { subs: Vec<SubCluster> },
    /// Second split phase: each node commits with its own subcluster.
    SplitNew { subs: Vec<SubCluster> },
    /// This cluster's local merge decision.
    MergeTx { plan: MergePlan, decision: Decision },
    /// Coordinator's global abort; returns the cluster to normal service.
    MergeAbort { tx: TxId },
    /// Coordinator's global commit.
    MergeNew { plan: MergePlan, e_new: u32 },
}

impl ConfigKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConfigKind::Stable => "stable",
            ConfigKind::NewQ { .. } => "new_q",
            ConfigKind::SplitJoint { .. } => "split_joint",
            ConfigKind::SplitNew { .. } => "split_new",
            ConfigKind::MergeTx { .. } => "merge_tx",
            ConfigKind::MergeAbort { .. } => "merge_abort",
            ConfigKind::MergeNew { .. } => "merge_new",
        }
    }
}

/// A configuration as stored in a log entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub cluster: ClusterId,
    /// Epoch the configuration belongs to.
    pub epoch: u32,
    /// Counts configuration entries within one cluster and epoch.
    pub version: u64,
    pub members: NodeSet,
    pub range: KeyRange,
    #[serde(flatten)]
    pub kind: ConfigKind,
}

impl ClusterConfig {
    pub fn bootstrap(cluster: ClusterId, members: NodeSet, range: KeyRange) -> Self {
        ClusterConfig { cluster, epoch: 0, version: 0, members, range, kind: ConfigKind::Stable }
    }

    /// A successor configuration in the same cluster and epoch.
    pub fn successor(&self, members: NodeSet, kind: ConfigKind) -> Self {
        ClusterConfig {
            cluster: self.cluster,
            epoch: self.epoch,
            version: self.version + 1,
            members,
            range: self.range.clone(),
            kind,
        }
    }

    pub fn is_member(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }

    pub fn subs(&self) -> Option<&[SubCluster]> {
        match &self.kind {
            ConfigKind::SplitJoint { subs } | ConfigKind::SplitNew { subs } => Some(subs),
            _ => None,
        }
    }

    /// The subcluster `node` lands in, if this is a split configuration.
    pub fn sub_of(&self, node: NodeId) -> Option<&SubCluster> {
        self.subs()?.iter().find(|s| s.members.contains(&node))
    }

    pub fn election_quorum(&self) -> QuorumRule {
        match &self.kind {
            ConfigKind::SplitJoint { subs } | ConfigKind::SplitNew { subs } => {
                QuorumRule::joint(subs.iter().map(|s| s.members.clone()).collect())
            }
            ConfigKind::NewQ { quorum, .. } => QuorumRule::fixed(*quorum, self.members.clone()),
            _ => QuorumRule::majority(self.members.clone()),
        }
    }

    /// Commit rule for the cluster as a whole. During the leave phase of a
    /// split a node instead commits new entries with its own subcluster; see
    /// [`ClusterConfig::sub_commit_quorum`].
    pub fn commit_quorum(&self) -> QuorumRule {
        match &self.kind {
            ConfigKind::NewQ { quorum, .. } => QuorumRule::fixed(*quorum, self.members.clone()),
            _ => QuorumRule::majority(self.members.clone()),
        }
    }

    pub fn sub_commit_quorum(&self, node: NodeId) -> Option<QuorumRule> {
        match &self.kind {
            ConfigKind::SplitNew { subs } => {
                subs.iter().find(|s| s.members.contains(&node)).map(|s| QuorumRule::majority(s.members.clone()))
            }
            _ => None,
        }
    }

    /// Configuration a subcluster starts with once the split is done.
    pub fn child(&self, sub: &SubCluster) -> ClusterConfig {
        ClusterConfig {
            cluster: sub.cluster,
            epoch: self.epoch + 1,
            version: 0,
            members: sub.members.clone(),
            range: sub.range.clone(),
            kind: ConfigKind::Stable,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.members.is_empty() {
            return Err(ConfigError::NoMembers);
        }
        match &self.kind {
            ConfigKind::Stable | ConfigKind::MergeAbort { .. } => Ok(()),
            ConfigKind::NewQ { quorum, .. } => {
                if *quorum == 0 || *quorum > self.members.len() {
                    Err(ConfigError::BadQuorum { quorum: *quorum, members: self.members.len() })
                } else {
                    Ok(())
                }
            }
            ConfigKind::SplitJoint { subs } | ConfigKind::SplitNew { subs } => validate_subs(self, subs),
            ConfigKind::MergeTx { plan, .. } | ConfigKind::MergeNew { plan, .. } => plan.validate(),
        }
    }
}

fn validate_subs(config: &ClusterConfig, subs: &[SubCluster]) -> Result<(), ConfigError> {
    if subs.len() < 2 {
        return Err(ConfigError::TooFewSubclusters);
    }
    let mut seen = NodeSet::new();
    let mut clusters = std::collections::BTreeSet::new();
    let mut range = KeyRange::empty();
    for s in subs {
        if s.members.is_empty() {
            return Err(ConfigError::EmptySubcluster(s.cluster));
        }
        if !clusters.insert(s.cluster) {
            return Err(ConfigError::DuplicateCluster(s.cluster));
        }
        for n in &s.members {
            if !seen.insert(*n) {
                return Err(ConfigError::SubclusterOverlap(*n));
            }
        }
        if range.intersects(&s.range) {
            return Err(ConfigError::RangeOverlap);
        }
        range = range.union(&s.range);
    }
    if seen != config.members {
        return Err(ConfigError::SubclusterMembers);
    }
    if range != config.range {
        return Err(ConfigError::RangeCoverage);
    }
    Ok(())
}

impl fmt::Display for ClusterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let members: Vec<String> = self.members.iter().map(|n| n.0.to_string()).collect();
        write!(
            f,
            "{} e{} v{} {} {{{}}} [{}]",
            self.cluster,
            self.epoch,
            self.version,
            self.kind.name(),
            members.join(","),
            self.range
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::nodes;

    fn six() -> ClusterConfig {
        ClusterConfig::bootstrap(ClusterId(1), nodes(1..=6), KeyRange::full())
    }

    fn halves() -> Vec<SubCluster> {
        vec![
            SubCluster { cluster: ClusterId(2), members: nodes(1..=3), range: ":m".parse().unwrap() },
            SubCluster { cluster: ClusterId(3), members: nodes(4..=6), range: "m:".parse().unwrap() },
        ]
    }

    #[test]
    fn joint_split_quorums() {
        let joint = six().successor(nodes(1..=6), ConfigKind::SplitJoint { subs: halves() });
        joint.validate().unwrap();
        assert!(!joint.election_quorum().satisfied(&nodes([1, 2, 3, 4])).unwrap());
        assert!(joint.election_quorum().satisfied(&nodes([1, 2, 4, 5])).unwrap());
        assert!(joint.commit_quorum().satisfied(&nodes([1, 2, 3, 4])).unwrap());
        let leave = joint.successor(nodes(1..=6), ConfigKind::SplitNew { subs: halves() });
        assert!(leave.sub_commit_quorum(NodeId(5)).unwrap().satisfied(&nodes([4, 6])).unwrap());
        assert_eq!(leave.child(&halves()[1]).epoch, 1);
    }

    #[test]
    fn split_validation() {
        let mut subs = halves();
        subs[1].members = nodes(3..=6);
        let bad = six().successor(nodes(1..=6), ConfigKind::SplitJoint { subs });
        assert_eq!(bad.validate(), Err(ConfigError::SubclusterOverlap(NodeId(3))));
        let mut subs = halves();
        subs[1].range = "n:".parse().unwrap();
        let bad = six().successor(nodes(1..=6), ConfigKind::SplitJoint { subs });
        assert_eq!(bad.validate(), Err(ConfigError::RangeCoverage));
        let mut subs = halves();
        subs.truncate(1);
        let bad = six().successor(nodes(1..=6), ConfigKind::SplitJoint { subs });
        assert_eq!(bad.validate(), Err(ConfigError::TooFewSubclusters));
    }

    #[test]
    fn resume_members_rules() {
        let mut plan = MergePlan {
            id: TxId { coordinator: ClusterId(2), at: EpochTerm::new(1, 3), seq: 0 },
            participants: halves()
                .into_iter()
                .map(|s| Participant { cluster: s.cluster, members: s.members, range: s.range })
                .collect(),
            merged_cluster: ClusterId(9),
            resume_members: None,
        };
        plan.validate().unwrap();
        assert_eq!(plan.merged_range(), KeyRange::full());
        plan.resume_members = Some(nodes([1, 2, 3, 4]));
        plan.validate().unwrap();
        plan.resume_members = Some(nodes([1, 2, 4, 5]));
        assert_eq!(plan.validate(), Err(ConfigError::BadResumeMembers));
        plan.resume_members = Some(nodes([1, 2, 3, 7]));
        assert_eq!(plan.validate(), Err(ConfigError::BadResumeMembers));
    }

    #[test]
    fn json_roundtrip() {
        let c = six().successor(nodes(1..=6), ConfigKind::SplitNew { subs: halves() });
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ClusterConfig>(&s).unwrap(), c);
    }
}
