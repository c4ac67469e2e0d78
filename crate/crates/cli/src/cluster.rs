//! Verbs that talk to a running deployment.

use crate::{emit, CliError};
use recraft_client::{AdminClient, ClientError, KvClient, NodeClient, RegistryClient};
use recraft_core::config::{Participant, SubCluster};
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::kv::{KvOp, KvResult};
use recraft_core::message::NamingEntry;
use recraft_core::node::{AdminOp, AdminOutcome, NodeStatus, Role};
use recraft_core::range::KeyRange;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write;

pub fn parse_sub(s: &str) -> Result<SubCluster, String> {
    let mut parts = s.splitn(3, ':');
    let (Some(id), Some(members), Some(range)) = (parts.next(), parts.next(), parts.next()) else {
        return Err("expected id:members:range".into());
    };
    Ok(SubCluster {
        cluster: ClusterId(id.parse().map_err(|e| format!("cluster id {id}: {e}"))?),
        members: crate::parse_nodes(members)?,
        range: range.parse().map_err(|e| format!("range {range}: {e}"))?,
    })
}

pub fn fmt_nodes(nodes: &NodeSet) -> String {
    nodes.iter().map(|n| n.0.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_status(s: &NodeStatus) -> String {
    let role = match s.role {
        Role::Follower => "follower",
        Role::Candidate => "candidate",
        Role::Leader => "leader",
        Role::Retired => "retired",
    };
    let cluster = s.cluster.map_or("-".to_string(), |c| c.to_string());
    let epoch = s.config_epoch.map_or("-".to_string(), |e| e.to_string());
    let range = s.range.as_ref().map_or("-".to_string(), KeyRange::to_string);
    format!(
        "{} {role:<9} in {cluster} epoch {epoch} range {range} term {} members {} commit {} applied {}",
        s.id,
        s.current,
        fmt_nodes(&s.members),
        s.commit_index,
        s.applied_index
    )
}

#[derive(Serialize)]
struct ClusterView {
    entry: NamingEntry,
    nodes: BTreeMap<NodeId, Result<NodeStatus, String>>,
}

pub struct Ctx {
    registry: RegistryClient,
    admin: AdminClient,
    json: bool,
}

impl Ctx {
    pub fn new(registry: &str, json: bool) -> Self {
        let registry = RegistryClient::new(registry);
        Ctx { admin: AdminClient::new(registry.clone()), registry, json }
    }

    pub async fn status(&self, cluster: Option<ClusterId>, node: Option<String>) -> Result<(), CliError> {
        if let Some(url) = node {
            let s = NodeClient::new(&url).status().await?;
            emit(self.json, &s, || fmt_status(&s));
            return Ok(());
        }
        let mut views = Vec::new();
        for entry in self.registry.list().await? {
            if cluster.is_some_and(|c| c != entry.cluster) {
                continue;
            }
            let nodes = self.admin.statuses(entry.cluster).await?;
            let nodes = nodes.into_iter().map(|(n, s)| (n, s.map_err(|e| e.to_string()))).collect();
            views.push(ClusterView { entry, nodes });
        }
        if let Some(c) = cluster {
            if views.is_empty() {
                return Err(ClientError::UnknownCluster(c).into());
            }
        }
        emit(self.json, &views, || {
            let mut out = String::new();
            for v in &views {
                let e = &v.entry;
                let _ = writeln!(
                    out,
                    "{} epoch {} range {} members {}",
                    e.cluster,
                    e.epoch,
                    e.range,
                    fmt_nodes(&e.members)
                );
                for (n, s) in &v.nodes {
                    match s {
                        Ok(s) => writeln!(out, "  {}", fmt_status(s)),
                        Err(e) => writeln!(out, "  {n} unreachable: {e}"),
                    }
                    .expect("string write");
                }
            }
            out
        });
        Ok(())
    }

    pub async fn kv(&self, op: KvOp) -> Result<(), CliError> {
        let mut client = KvClient::new(self.registry.clone());
        let result = client.execute(op).await?;
        emit(self.json, &result, || match &result {
            KvResult::Ok { value: Some(v) } => v.to_string(),
            KvResult::Ok { value: None } => "(none)".into(),
            other => format!("{other:?}"),
        });
        Ok(())
    }

    async fn admin(&self, cluster: ClusterId, op: AdminOp) -> Result<AdminOutcome, CliError> {
        Ok(self.admin.run(cluster, op).await?)
    }

    pub async fn split(&self, cluster: ClusterId, subs: Vec<SubCluster>) -> Result<(), CliError> {
        let outcome = self.admin(cluster, AdminOp::Split { subs }).await?;
        emit(self.json, &outcome, || match &outcome {
            AdminOutcome::Split { clusters, boundary } => {
                let mut out = format!("{cluster} split at index {boundary}\n");
                for (c, epoch) in clusters {
                    let _ = writeln!(out, "  {c} epoch {epoch}");
                }
                out
            }
            other => format!("{other:?}"),
        });
        Ok(())
    }

    pub async fn merge(
        &self,
        clusters: Vec<ClusterId>,
        into: ClusterId,
        resume: Option<NodeSet>,
    ) -> Result<(), CliError> {
        let Some(&coordinator) = clusters.first() else {
            return Err(CliError::Usage("merge needs at least one cluster".into()));
        };
        let mut participants = Vec::new();
        for c in &clusters {
            let e = self.registry.entry(*c).await?;
            participants.push(Participant { cluster: e.cluster, members: e.members, range: e.range });
        }
        let op = AdminOp::Merge { participants, merged_cluster: into, resume_members: resume };
        let outcome = self.admin(coordinator, op).await?;
        emit(self.json, &outcome, || match &outcome {
            AdminOutcome::Merge { tx, committed: true, e_new } => {
                let epoch = e_new.map_or("?".to_string(), |e| e.to_string());
                format!("{tx} committed: {into} at epoch {epoch}")
            }
            AdminOutcome::Merge { tx, committed: false, .. } => format!("{tx} aborted; participants keep serving"),
            other => format!("{other:?}"),
        });
        match outcome {
            AdminOutcome::Merge { committed: false, .. } => Err(CliError::Failed("merge aborted".into())),
            _ => Ok(()),
        }
    }

    pub async fn membership(&self, cluster: ClusterId, op: AdminOp) -> Result<(), CliError> {
        let outcome = self.admin(cluster, op).await?;
        emit(self.json, &outcome, || match &outcome {
            AdminOutcome::Membership { members, kind, index } => {
                format!("{cluster} members {} ({kind}) at index {index}", fmt_nodes(members))
            }
            other => format!("{other:?}"),
        });
        Ok(())
    }

    pub async fn naming_list(&self) -> Result<(), CliError> {
        let entries = self.registry.list().await?;
        self.print_entries(&entries);
        Ok(())
    }

    pub async fn naming_lookup(&self, range: &str) -> Result<(), CliError> {
        let range: KeyRange = range.parse().map_err(|e| CliError::Usage(format!("range {range}: {e}")))?;
        let entries = self.registry.lookup(&range).await?;
        self.print_entries(&entries);
        Ok(())
    }

    fn print_entries(&self, entries: &[NamingEntry]) {
        emit(self.json, &entries, || {
            let mut out = String::new();
            for e in entries {
                let _ = writeln!(
                    out,
                    "{} epoch {} range {} members {}",
                    e.cluster,
                    e.epoch,
                    e.range,
                    fmt_nodes(&e.members)
                );
            }
            if entries.is_empty() {
                out.push_str("(no clusters)\n");
            }
            out
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_specs_keep_colons_in_the_range() {
        let s = parse_sub("2:1,2,3:a:m").unwrap();
        assert_eq!(s.cluster, ClusterId(2));
        assert_eq!(s.members, recraft_core::ids::nodes([1, 2, 3]));
        assert_eq!(s.range, "a:m".parse().unwrap());
        assert!(parse_sub("2:1").is_err());
    }
}
