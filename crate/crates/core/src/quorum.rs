//! Quorum rules for election and commit.
//!
//! A node keeps one rule for elections and one for commits. They differ while
//! a split is in flight: joint mode elects with a majority of every
//! subcluster but still commits with the old majority.

use crate::ids::{NodeId, NodeSet};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum QuorumRule {
    /// `floor(n/2) + 1` of the members.
    Majority { members: NodeSet },
    /// A majority of every listed subconfiguration at once.
    JointAll { subconfigs: Vec<NodeSet> },
    /// At least `size` of the members.
    Fixed { size: usize, members: NodeSet },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuorumError {
    #[error("fixed quorum of {size} over {members} members")]
    FixedOutOfRange { size: usize, members: usize },
    #[error("joint rule lists overlapping subconfigurations")]
    OverlappingSubconfigs,
    #[error("joint rule without subconfigurations")]
    EmptyJoint,
}

pub fn majority(n: usize) -> usize {
    n / 2 + 1
}

impl QuorumRule {
    pub fn majority(members: NodeSet) -> Self {
        QuorumRule::Majority { members }
    }

    pub fn fixed(size: usize, members: NodeSet) -> Self {
        QuorumRule::Fixed { size, members }
    }

    pub fn joint(subconfigs: Vec<NodeSet>) -> Self {
        QuorumRule::JointAll { subconfigs }
    }

    pub fn validate(&self) -> Result<(), QuorumError> {
        match self {
            QuorumRule::Majority { .. } => Ok(()),
            QuorumRule::Fixed { size, members } => {
                if *size == 0 || *size > members.len() {
                    Err(QuorumError::FixedOutOfRange { size: *size, members: members.len() })
                } else {
                    Ok(())
                }
            }
            QuorumRule::JointAll { subconfigs } => {
                if subconfigs.is_empty() {
                    return Err(QuorumError::EmptyJoint);
                }
                let mut seen = BTreeSet::new();
                for sub in subconfigs {
                    for n in sub {
                        if !seen.insert(*n) {
                            return Err(QuorumError::OverlappingSubconfigs);
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Every node whose vote can count toward this rule.
    pub fn members(&self) -> NodeSet {
        match self {
            QuorumRule::Majority { members } | QuorumRule::Fixed { members, .. } => members.clone(),
            QuorumRule::JointAll { subconfigs } => subconfigs.iter().flatten().copied().collect(),
        }
    }

    pub fn contains(&self, node: NodeId) -> bool {
        match self {
            QuorumRule::Majority { members } | QuorumRule::Fixed { members, .. } => members.contains(&node),
            QuorumRule::JointAll { subconfigs } => subconfigs.iter().any(|s| s.contains(&node)),
        }
    }

    /// The `(member set, threshold)` constraints that must all hold.
    pub fn constraints(&self) -> Vec<(NodeSet, usize)> {
        match self {
            QuorumRule::Majority { members } => vec![(members.clone(), majority(members.len()))],
            QuorumRule::Fixed { size, members } => vec![(members.clone(), *size)],
            QuorumRule::JointAll { subconfigs } => subconfigs.iter().map(|s| (s.clone(), majority(s.len()))).collect(),
        }
    }

    /// Whether `votes` fulfil the rule. Votes from non-members are ignored.
    pub fn satisfied(&self, votes: &NodeSet) -> Result<bool, QuorumError> {
        self.validate()?;
        Ok(self.satisfied_unchecked(votes))
    }

    pub(crate) fn satisfied_unchecked(&self, votes: &NodeSet) -> bool {
        self.constraints().iter().all(|(members, need)| members.intersection(votes).count() >= *need)
    }

    /// Smallest number of votes that can satisfy the rule.
    pub fn min_votes(&self) -> usize {
        self.constraints().iter().map(|(_, need)| *need).sum()
    }
}

pub fn quorum_satisfied(rule: &QuorumRule, votes: &NodeSet) -> Result<bool, QuorumError> {
    rule.satisfied(votes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::nodes;

    #[test]
    fn majority_of_three() {
        let rule = QuorumRule::majority(nodes([1, 2, 3]));
        assert!(rule.satisfied(&nodes([1, 2])).unwrap());
        assert!(!rule.satisfied(&nodes([1])).unwrap());
    }

    #[test]
    fn joint_needs_every_subconfig() {
        let rule = QuorumRule::joint(vec![nodes([1, 2, 3]), nodes([4, 5, 6])]);
        assert!(!rule.satisfied(&nodes([1, 2, 4])).unwrap());
        assert!(rule.satisfied(&nodes([1, 2, 4, 5])).unwrap());
    }

    #[test]
    fn fixed_four_of_five() {
        let rule = QuorumRule::fixed(4, nodes(1..=5));
        assert!(!rule.satisfied(&nodes([1, 2, 3])).unwrap());
        assert!(rule.satisfied(&nodes([1, 2, 3, 5])).unwrap());
    }

    #[test]
    fn outsiders_do_not_count() {
        let rule = QuorumRule::majority(nodes([1, 2, 3]));
        assert!(!rule.satisfied(&nodes([1, 7, 8, 9])).unwrap());
    }

    #[test]
    fn malformed_rules_are_rejected() {
        assert_eq!(
            QuorumRule::fixed(6, nodes(1..=5)).satisfied(&nodes(1..=5)),
            Err(QuorumError::FixedOutOfRange { size: 6, members: 5 })
        );
        assert_eq!(
            QuorumRule::joint(vec![nodes([1, 2]), nodes([2, 3])]).validate(),
            Err(QuorumError::OverlappingSubconfigs)
        );
    }
}
