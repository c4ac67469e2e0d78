//! A registry and three nodes over real sockets.

use recraft_client::{AdminClient, KvClient, RegistryClient};
use recraft_core::config::{ClusterConfig, SubCluster};
use recraft_core::ids::{nodes, ClusterId, NodeId};
use recraft_core::node::{AdminOp, AdminOutcome, Role};
use recraft_core::range::KeyRange;
use recraft_server::node::{self, NodeConfig, Start};
use recraft_server::registry::{self, RegistryConfig};
use recraft_server::Handle;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

async fn start_node(id: u64, dir: &Path, registry: &str, start: Start) -> Handle {
    let mut cfg = NodeConfig::new(NodeId(id), dir.join(format!("n{id}")), start);
    cfg.registry = Some(registry.to_string());
    cfg.sync = false;
    node::start(cfg).await.unwrap()
}

async fn wait_for<F, Fut>(what: &str, mut check: F)
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    for _ in 0..200 {
        if check().await {
            return;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    panic!("timed out waiting for {what}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn serve_split_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry::start(RegistryConfig::new(dir.path().join("registry"))).await.unwrap();
    let config = ClusterConfig::bootstrap(ClusterId(1), nodes(1..=3), KeyRange::full());
    let mut handles = BTreeMap::new();
    for id in 1..=3 {
        handles.insert(id, start_node(id, dir.path(), reg.url(), Start::Bootstrap(config.clone())).await);
    }
    let registry = RegistryClient::new(reg.url());
    let admin = AdminClient::new(registry.clone());
    wait_for("cluster 1 to register", || async { registry.entry(ClusterId(1)).await.is_ok() }).await;
    let (leader, _) = admin.leader(ClusterId(1)).await.unwrap();

    let mut kv = KvClient::new(registry.clone());
    assert_eq!(kv.put("apple", "1").await.unwrap(), None);
    kv.put("zebra", "2").await.unwrap();
    assert_eq!(kv.get("apple").await.unwrap(), Some("1".into()));

    // Split off the leader alone; the other two form their own cluster.
    let others: Vec<u64> = (1..=3).filter(|n| *n != leader.0).collect();
    let subs = vec![
        SubCluster { cluster: ClusterId(2), members: nodes([leader.0]), range: "a:m".parse().unwrap() },
        SubCluster {
            cluster: ClusterId(3),
            members: nodes(others.clone()),
            range: KeyRange::interval("", Some("a")).union(&"m:".parse().unwrap()),
        },
    ];
    let outcome = admin.run(ClusterId(1), AdminOp::Split { subs }).await.unwrap();
    let AdminOutcome::Split { clusters, .. } = outcome else { panic!("unexpected outcome {outcome:?}") };
    assert_eq!(clusters.len(), 2);

    wait_for("both subclusters to register", || async {
        registry.entry(ClusterId(2)).await.is_ok() && registry.entry(ClusterId(3)).await.is_ok()
    })
    .await;
    for c in [2, 3] {
        let (_, node) = admin.leader(ClusterId(c)).await.unwrap();
        let s = node.status().await.unwrap();
        assert_eq!(s.config_epoch, Some(1));
        assert_eq!(s.role, Role::Leader);
    }
    assert_eq!(kv.get("apple").await.unwrap(), Some("1".into()));
    assert_eq!(kv.get("zebra").await.unwrap(), Some("2".into()));
    kv.put("mango", "3").await.unwrap();

    // A restarted member recovers its cluster and data from disk.
    let restarted = others[0];
    handles.remove(&restarted).unwrap().shutdown().await;
    handles.insert(restarted, start_node(restarted, dir.path(), reg.url(), Start::Join).await);
    wait_for("restarted node to rejoin cluster 3", || {
        let admin = &admin;
        async move {
            let statuses = admin.statuses(ClusterId(3)).await.unwrap();
            matches!(&statuses[&NodeId(restarted)], Ok(s) if s.cluster == Some(ClusterId(3)) && s.applied_index > 0)
        }
    })
    .await;
    assert_eq!(kv.get("mango").await.unwrap(), Some("3".into()));

    for (_, h) in handles {
        h.shutdown().await;
    }
    reg.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn merge_then_grow() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry::start(RegistryConfig::new(dir.path().join("registry"))).await.unwrap();
    let left = ClusterConfig::bootstrap(ClusterId(1), nodes(1..=3), ":m".parse().unwrap());
    let right = ClusterConfig::bootstrap(ClusterId(2), nodes(4..=6), "m:".parse().unwrap());
    let mut handles = Vec::new();
    for id in 1..=6 {
        let config = if id <= 3 { left.clone() } else { right.clone() };
        handles.push(start_node(id, dir.path(), reg.url(), Start::Bootstrap(config)).await);
    }
    handles.push(start_node(7, dir.path(), reg.url(), Start::Join).await);
    let registry = RegistryClient::new(reg.url());
    let admin = AdminClient::new(registry.clone());
    wait_for("both clusters to register", || async {
        registry.entry(ClusterId(1)).await.is_ok() && registry.entry(ClusterId(2)).await.is_ok()
    })
    .await;

    let mut kv = KvClient::new(registry.clone());
    kv.put("b", "left").await.unwrap();
    kv.put("x", "right").await.unwrap();

    let participants = [&left, &right]
        .iter()
        .map(|c| recraft_core::config::Participant {
            cluster: c.cluster,
            members: c.members.clone(),
            range: c.range.clone(),
        })
        .collect();
    let op = AdminOp::Merge { participants, merged_cluster: ClusterId(3), resume_members: None };
    let outcome = admin.run(ClusterId(1), op).await.unwrap();
    assert!(matches!(outcome, AdminOutcome::Merge { committed: true, .. }), "{outcome:?}");

    wait_for("merged cluster to register", || async { registry.entry(ClusterId(3)).await.is_ok() }).await;
    let (_, leader) = admin.leader(ClusterId(3)).await.unwrap();
    let s = leader.status().await.unwrap();
    assert_eq!(s.members, nodes(1..=6));
    assert_eq!(s.range, Some(KeyRange::full()));
    assert_eq!(kv.get("b").await.unwrap(), Some("left".into()));
    assert_eq!(kv.get("x").await.unwrap(), Some("right".into()));

    let outcome = admin.run(ClusterId(3), AdminOp::ChangeMembers { members: nodes(1..=7) }).await.unwrap();
    let AdminOutcome::Membership { members, .. } = outcome else { panic!("unexpected outcome {outcome:?}") };
    assert_eq!(members, nodes(1..=7));
    wait_for("node 7 to catch up", || {
        let admin = &admin;
        async move {
            let statuses = admin.statuses(ClusterId(3)).await.unwrap();
            matches!(statuses.get(&NodeId(7)), Some(Ok(s)) if s.cluster == Some(ClusterId(3)) && s.applied_index >= s.commit_index && s.applied_index > 0)
        }
    })
    .await;

    for h in handles {
        h.shutdown().await;
    }
    reg.shutdown().await;
}
