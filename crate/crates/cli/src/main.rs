//! `recraft`: operate a running deployment, analyze membership changes and
//! drive the simulator.

mod analyze;
mod cluster;
mod sim;

use clap::{Parser, Subcommand};
use recraft_client::ClientError;
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::membership::PlanError;
use recraft_sim::scenario::ScenarioError;
use serde::Serialize;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
    /// The command ran, and what it checked does not hold.
    #[error("{0}")]
    Failed(String),
}

#[derive(Parser)]
#[command(name = "recraft", version, about = "Operate ReCraft clusters and run the simulator")]
struct Cli {
    /// Naming registry of the deployment.
    #[arg(long, global = true, env = "RECRAFT_REGISTRY", default_value = "http://127.0.0.1:7000")]
    registry: String,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Clusters, their members and each member's view.
    Status {
        /// Only this cluster.
        #[arg(long)]
        cluster: Option<u64>,
        /// Ask one node directly instead of going through the registry.
        #[arg(long, conflicts_with = "cluster")]
        node: Option<String>,
    },
    Put {
        key: String,
        value: String,
    },
    Get {
        key: String,
    },
    Delete {
        key: String,
    },
    /// Split a cluster into subclusters.
    Split {
        #[arg(long)]
        cluster: u64,
        /// A subcluster as `id:members:range`, e.g. `2:1,2,3:a:m`.
        #[arg(long = "sub", required = true, value_parser = cluster::parse_sub)]
        subs: Vec<recraft_core::config::SubCluster>,
    },
    /// Merge clusters; the first one listed coordinates.
    Merge {
        /// Participants, coordinator first.
        #[arg(long = "cluster", required = true, num_args = 1.., value_delimiter = ',')]
        clusters: Vec<u64>,
        /// Id of the merged cluster.
        #[arg(long)]
        into: u64,
        /// Members the merged cluster shrinks to right after the merge.
        #[arg(long, value_parser = parse_nodes)]
        resume: Option<NodeSet>,
    },
    /// Membership changes.
    #[command(subcommand)]
    Member(MemberCmd),
    /// The naming registry.
    #[command(subcommand)]
    Naming(NamingCmd),
    /// Offline analysis of membership changes.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCmd),
    /// The deterministic simulator.
    #[command(subcommand)]
    Sim(sim::SimCmd),
}

#[derive(Subcommand)]
enum MemberCmd {
    /// Add nodes in one step with an enlarged intermediate quorum.
    Add {
        #[arg(long)]
        cluster: u64,
        #[arg(long, value_parser = parse_nodes)]
        nodes: NodeSet,
    },
    /// Remove nodes in one step with an enlarged intermediate quorum.
    Remove {
        #[arg(long)]
        cluster: u64,
        #[arg(long, value_parser = parse_nodes)]
        nodes: NodeSet,
    },
    /// Drop an intermediate quorum back to a majority.
    ResizeQuorum {
        #[arg(long)]
        cluster: u64,
    },
    /// Plan and run a full change to the given members.
    Change {
        #[arg(long)]
        cluster: u64,
        #[arg(long, value_parser = parse_nodes)]
        members: NodeSet,
    },
}

#[derive(Subcommand)]
enum NamingCmd {
    List,
    /// Clusters whose range intersects RANGE, e.g. `a:m`.
    Lookup {
        range: String,
    },
}

pub fn parse_nodes(s: &str) -> Result<NodeSet, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map(NodeId).map_err(|e| format!("{p}: {e}")))
        .collect()
}

/// Prints `value` as JSON or `text` as is.
pub fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    } else {
        let t = text();
        print!("{t}");
        if !t.ends_with('\n') {
            println!();
        }
    }
}

async fn dispatch(cli: Cli) -> Result<(), CliError> {
    let ctx = cluster::Ctx::new(&cli.registry, cli.json);
    match cli.cmd {
        Cmd::Status { cluster, node } => ctx.status(cluster.map(ClusterId), node).await,
        Cmd::Put { key, value } => ctx.kv(recraft_core::kv::KvOp::Put { key: key.into(), value: value.into() }).await,
        Cmd::Get { key } => ctx.kv(recraft_core::kv::KvOp::Get { key: key.into() }).await,
        Cmd::Delete { key } => ctx.kv(recraft_core::kv::KvOp::Delete { key: key.into() }).await,
        Cmd::Split { cluster, subs } => ctx.split(ClusterId(cluster), subs).await,
        Cmd::Merge { clusters, into, resume } => {
            ctx.merge(clusters.into_iter().map(ClusterId).collect(), ClusterId(into), resume).await
        }
        Cmd::Member(m) => {
            use recraft_core::node::AdminOp;
            let (cluster, op) = match m {
                MemberCmd::Add { cluster, nodes } => (cluster, AdminOp::AddNodes { nodes }),
                MemberCmd::Remove { cluster, nodes } => (cluster, AdminOp::RemoveNodes { nodes }),
                MemberCmd::ResizeQuorum { cluster } => (cluster, AdminOp::ResizeQuorum),
                MemberCmd::Change { cluster, members } => (cluster, AdminOp::ChangeMembers { members }),
            };
            ctx.membership(ClusterId(cluster), op).await
        }
        Cmd::Naming(NamingCmd::List) => ctx.naming_list().await,
        Cmd::Naming(NamingCmd::Lookup { range }) => ctx.naming_lookup(&range).await,
        Cmd::Analyze(a) => analyze::run(a, cli.json),
        Cmd::Sim(s) => sim::run(s, cli.json),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    match dispatch(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("recraft: {e}");
            ExitCode::FAILURE
        }
    }
}
