//! The `recraft` binary against the simulator and a live deployment.

use recraft_core::config::ClusterConfig;
use recraft_core::ids::{nodes, ClusterId, NodeId};
use recraft_core::range::KeyRange;
use recraft_server::node::{self, NodeConfig, Start};
use recraft_server::registry::{self, RegistryConfig};
use std::process::Output;
use std::time::Duration;
use tokio::process::Command;

async fn recraft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recraft")).args(args).output().await.expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[tokio::test]
async fn heatmap_is_csv() {
    let o = recraft(&["analyze", "heatmap", "--max", "4"]).await;
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(rows.len(), 10, "{text}");
    assert_eq!(rows[0], "n_new\\n_old,1,2,3,4");
    assert!(rows.iter().all(|r| r.split(',').count() == 5));
}

#[tokio::test]
async fn plan_stages_large_removals() {
    let o = recraft(&["--json", "analyze", "plan", "--old", "1,2,3,4,5", "--new", "1,2"]).await;
    assert!(o.status.success());
    let steps: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(steps.as_array().unwrap().len() >= 2, "{steps}");
}

#[tokio::test]
async fn builtin_scenario_runs_clean() {
    let o = recraft(&["sim", "run", "--builtin", "split-three-merge-two"]).await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("no violations"));
}

#[tokio::test]
async fn generated_trace_round_trips_through_check() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    let trace = dir.path().join("t.jsonl");
    let o = recraft(&["sim", "generate", "17"]).await;
    assert!(o.status.success());
    std::fs::write(&scenario, &o.stdout).unwrap();
    let run = recraft(&["--json", "sim", "run", scenario.to_str().unwrap(), "--trace", trace.to_str().unwrap()]).await;
    assert!(run.status.success(), "{}", stdout(&run));
    let checked = recraft(&[
        "--json",
        "sim",
        "check",
        "--scenario",
        scenario.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ])
    .await;
    assert!(checked.status.success());
    let a: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&checked.stdout).unwrap();
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(a["events"], b["events"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn operates_a_live_deployment() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry::start(RegistryConfig::new(dir.path().join("registry"))).await.unwrap();
    let config = ClusterConfig::bootstrap(ClusterId(1), nodes(1..=3), KeyRange::full());
    let mut handles = Vec::new();
    for id in 1..=3 {
        let mut cfg = NodeConfig::new(NodeId(id), dir.path().join(format!("n{id}")), Start::Bootstrap(config.clone()));
        cfg.registry = Some(reg.url().to_string());
        cfg.sync = false;
        handles.push(node::start(cfg).await.unwrap());
    }
    let r = reg.url().to_string();
    let cli = |args: &[&str]| {
        let mut all = vec!["--registry", r.as_str()];
        all.extend_from_slice(args);
        let all: Vec<String> = all.into_iter().map(String::from).collect();
        async move { recraft(&all.iter().map(String::as_str).collect::<Vec<_>>()).await }
    };

    for _ in 0..100 {
        if stdout(&cli(&["naming", "list"]).await).contains("c1 ") {
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    assert!(cli(&["put", "kiwi", "green"]).await.status.success());
    assert_eq!(stdout(&cli(&["get", "kiwi"]).await).trim(), "green");

    let bad = cli(&["split", "--cluster", "1", "--sub", "2:1:a:m", "--sub", "3:2,3:m:"]).await;
    assert!(!bad.status.success(), "a split that leaves keys unowned must be refused");
    assert!(String::from_utf8_lossy(&bad.stderr).contains("invalid"), "{}", String::from_utf8_lossy(&bad.stderr));

    let split = cli(&["split", "--cluster", "1", "--sub", "2:1::m", "--sub", "3:2,3:m:"]).await;
    assert!(split.status.success(), "{}", String::from_utf8_lossy(&split.stderr));
    let text = stdout(&split);
    assert!(text.contains("c2 epoch 1") && text.contains("c3 epoch 1"), "{text}");
    assert_eq!(stdout(&cli(&["get", "kiwi"]).await).trim(), "green");

    let status = cli(&["--json", "status", "--cluster", "3"]).await;
    assert!(status.status.success());
    let views: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(views[0]["entry"]["epoch"], 1);

    for h in handles {
        h.shutdown().await;
    }
    reg.shutdown().await;
}
