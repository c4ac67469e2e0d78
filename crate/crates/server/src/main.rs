use clap::{Args, Parser, Subcommand};
use recraft_core::config::ClusterConfig;
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::range::KeyRange;
use recraft_server::node::{NodeConfig, Start};
use recraft_server::registry::RegistryConfig;
use recraft_server::{node, registry, Handle};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "recraft-server", version, about = "Run a ReCraft node or the naming registry")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one node.
    Node(NodeArgs),
    /// Run the naming registry and address book.
    Registry {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: SocketAddr,
    },
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long)]
    id: u64,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7001")]
    listen: SocketAddr,
    /// URL other nodes should use for this one.
    #[arg(long)]
    advertise: Option<String>,
    /// Registry base URL, e.g. http://127.0.0.1:7000.
    #[arg(long)]
    registry: Option<String>,
    /// A peer address, as `id=url`; may repeat.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<(NodeId, String)>,
    /// Start empty and wait to be added to a cluster.
    #[arg(long, conflicts_with_all = ["cluster", "members"])]
    join: bool,
    /// Cluster to found when the data directory is empty.
    #[arg(long, requires = "members")]
    cluster: Option<u64>,
    /// Founding members, comma separated.
    #[arg(long, value_parser = parse_members)]
    members: Option<NodeSet>,
    /// Key range of the founded cluster, as `start:end`.
    #[arg(long, default_value = ":")]
    range: KeyRange,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip fsync after writes.
    #[arg(long)]
    no_sync: bool,
}

fn parse_peer(s: &str) -> Result<(NodeId, String), String> {
    let (id, url) = s.split_once('=').ok_or("expected id=url")?;
    Ok((NodeId(id.parse().map_err(|e| format!("{e}"))?), url.to_string()))
}

fn parse_members(s: &str) -> Result<NodeSet, String> {
    s.split(',').map(|p| p.trim().parse().map(NodeId).map_err(|e| format!("{p}: {e}"))).collect()
}

async fn run(cli: Cli) -> Result<Handle, String> {
    match cli.cmd {
        Cmd::Registry { dir, listen } => {
            registry::start(RegistryConfig { dir, listen }).await.map_err(|e| e.to_string())
        }
        Cmd::Node(a) => {
            let id = NodeId(a.id);
            let start = match (a.join, a.cluster, a.members) {
                (true, _, _) => Start::Join,
                (false, Some(c), Some(m)) => Start::Bootstrap(ClusterConfig::bootstrap(ClusterId(c), m, a.range)),
                (false, None, Some(m)) => Start::Bootstrap(ClusterConfig::bootstrap(ClusterId(1), m, a.range)),
                _ => Start::Join,
            };
            let mut cfg = NodeConfig::new(id, a.data_dir, start);
            cfg.listen = a.listen;
            cfg.advertise = a.advertise;
            cfg.registry = a.registry;
            cfg.peers = a.peers.into_iter().collect();
            cfg.seed = a.seed.unwrap_or(a.id);
            cfg.sync = !a.no_sync;
            node::start(cfg).await.map_err(|e| e.to_string())
        }
    }
}

async fn terminated() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        if let Ok(mut term) = signal(SignalKind::terminate()) {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
            return;
        }
    }
    let _ = tokio::signal::ctrl_c().await;
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let handle = match run(Cli::parse()).await {
        Ok(h) => h,
        Err(e) => {
            eprintln!("recraft-server: {e}");
            return ExitCode::FAILURE;
        }
    };
    terminated().await;
    handle.shutdown().await;
    ExitCode::SUCCESS
}
