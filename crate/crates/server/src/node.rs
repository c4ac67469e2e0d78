//! One node behind HTTP.
//!
//! The driver task is the only owner of the [`Node`]. Every step is
//! persisted before its outputs leave the process. Each peer gets a FIFO
//! link task that batches framed envelopes into `POST /v1/raft` bodies.

use crate::{stopped, Failure, Handle, ServerError};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use recraft_client::api::{AddressEntry, AdminRequest, AdminResponse};
use recraft_client::{NodeClient, RegistryClient};
use recraft_core::config::ClusterConfig;
use recraft_core::ids::NodeId;
use recraft_core::kv::Command;
use recraft_core::message::{Envelope, NamingEntry};
use recraft_core::node::{ClientReply, Input, Node, NodeOptions, NodeStatus, Output};
use recraft_core::storage::FileStore;
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::time::MissedTickBehavior;
use tracing::{debug, error, info, warn};

/// Frames queued per peer before new ones are dropped.
const LINK_QUEUE: usize = 4096;
const BATCH_BYTES: usize = 1 << 20;
const RAFT_BODY_LIMIT: usize = 256 << 20;
const ADDRESS_REFRESH: Duration = Duration::from_secs(1);

/// What a node with an empty data directory starts as.
#[derive(Clone, Debug)]
pub enum Start {
    /// A founding member of `config`.
    Bootstrap(ClusterConfig),
    /// An empty node waiting to be added by some cluster.
    Join,
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub id: NodeId,
    pub data_dir: PathBuf,
    pub listen: SocketAddr,
    /// URL peers use to reach this node; defaults to `http://<bound addr>`.
    pub advertise: Option<String>,
    pub registry: Option<String>,
    pub peers: BTreeMap<NodeId, String>,
    /// Ignored when the data directory already holds state.
    pub start: Start,
    pub seed: u64,
    pub options: NodeOptions,
    pub tick: Duration,
    pub sync: bool,
    pub kv_timeout: Duration,
    pub admin_timeout: Duration,
}

impl NodeConfig {
    pub fn new(id: NodeId, data_dir: impl Into<PathBuf>, start: Start) -> Self {
        NodeConfig {
            id,
            data_dir: data_dir.into(),
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            advertise: None,
            registry: None,
            peers: BTreeMap::new(),
            start,
            seed: id.0,
            options: NodeOptions::default(),
            tick: Duration::from_millis(5),
            sync: true,
            kv_timeout: Duration::from_secs(10),
            admin_timeout: Duration::from_secs(120),
        }
    }
}

enum Request {
    Raft(Envelope),
    Kv(Command, oneshot::Sender<ClientReply>),
    Admin(AdminRequest, oneshot::Sender<AdminResponse>),
    Status(oneshot::Sender<NodeStatus>),
    Peer(NodeId, String),
    Naming(Vec<NamingEntry>),
}

/// Opens the data directory, binds the listener and starts serving.
pub async fn start(cfg: NodeConfig) -> Result<Handle, ServerError> {
    let (mut store, found) = FileStore::open(&cfg.data_dir, cfg.sync)?;
    let mut node = match (found, &cfg.start) {
        (Some(d), _) => {
            info!(node = %cfg.id, dir = %cfg.data_dir.display(), "recovered durable state");
            Node::from_durable(cfg.id, d, cfg.options.clone(), cfg.seed)
        }
        (None, Start::Bootstrap(config)) => {
            config.validate().map_err(|e| ServerError::Config(e.to_string()))?;
            if !config.is_member(cfg.id) {
                return Err(ServerError::Config(format!("node {} is not in cluster {}", cfg.id, config.cluster)));
            }
            let node = Node::bootstrap(cfg.id, config.clone(), cfg.options.clone(), cfg.seed);
            store.init(node.durable())?;
            node
        }
        (None, Start::Join) => {
            let node = Node::joining(cfg.id, cfg.options.clone(), cfg.seed);
            store.init(node.durable())?;
            node
        }
    };
    node.record_log_events(true);

    let listener = TcpListener::bind(cfg.listen).await?;
    let addr = listener.local_addr()?;
    let url = cfg.advertise.clone().unwrap_or_else(|| format!("http://{addr}"));
    let (shutdown, shutdown_rx) = watch::channel(false);
    let (tx, rx) = mpsc::channel(1024);
    let registry = cfg.registry.as_deref().map(RegistryClient::new);

    let mut peers = Peers::new(cfg.id);
    for (n, u) in &cfg.peers {
        peers.set(*n, u.clone());
    }
    let driver = Driver {
        node,
        store,
        started: Instant::now(),
        tx: tx.clone(),
        registry: registry.clone(),
        peers,
        next_id: 0,
        kv: BTreeMap::new(),
        admin: BTreeMap::new(),
    };
    let mut tasks = vec![tokio::spawn(driver.run(rx, cfg.tick, shutdown_rx.clone()))];
    if let Some(registry) = registry {
        let me = AddressEntry { node: cfg.id, url: url.clone() };
        tasks.push(tokio::spawn(refresh_addresses(registry, me, tx.clone(), shutdown_rx.clone())));
    }

    let state = Api { tx, kv_timeout: cfg.kv_timeout, admin_timeout: cfg.admin_timeout };
    let app = Router::new()
        .route("/v1/raft", post(raft).layer(DefaultBodyLimit::max(RAFT_BODY_LIMIT)))
        .route("/v1/kv", post(kv))
        .route("/v1/admin", post(admin))
        .route("/v1/status", get(status))
        .route("/v1/peers", post(peer))
        .with_state(state);
    let serve = axum::serve(listener, app).with_graceful_shutdown(stopped(shutdown_rx));
    tasks.push(tokio::spawn(async move {
        if let Err(e) = serve.await {
            error!("http server failed: {e}");
        }
    }));
    info!(node = %cfg.id, %url, "serving");
    Ok(Handle { addr, url, shutdown, tasks })
}

struct Driver {
    node: Node,
    store: FileStore,
    started: Instant,
    tx: mpsc::Sender<Request>,
    registry: Option<RegistryClient>,
    peers: Peers,
    next_id: u64,
    kv: BTreeMap<u64, oneshot::Sender<ClientReply>>,
    admin: BTreeMap<u64, oneshot::Sender<AdminResponse>>,
}

impl Driver {
    async fn run(mut self, mut rx: mpsc::Receiver<Request>, tick: Duration, shutdown: watch::Receiver<bool>) {
        let mut ticker = tokio::time::interval(tick);
        ticker.set_missed_tick_behavior(MissedTickBehavior::Skip);
        let mut stop = std::pin::pin!(stopped(shutdown));
        loop {
            let input = tokio::select! {
                _ = &mut stop => break,
                _ = ticker.tick() => {
                    self.kv.retain(|_, r| !r.is_closed());
                    self.admin.retain(|_, r| !r.is_closed());
                    Input::Tick
                }
                req = rx.recv() => match req {
                    None => break,
                    Some(req) => match self.accept(req) {
                        Some(input) => input,
                        None => continue,
                    },
                },
            };
            let now = self.started.elapsed().as_micros() as u64;
            let outputs = self.node.step(now, input);
            if let Err(e) = self.store.persist(&mut self.node) {
                error!(node = %self.node.id(), "cannot persist, stopping: {e}");
                break;
            }
            for o in outputs {
                self.dispatch(o);
            }
        }
        debug!(node = %self.node.id(), "driver stopped");
    }

    fn accept(&mut self, req: Request) -> Option<Input> {
        match req {
            Request::Raft(env) => Some(Input::Message { from: env.from, msg: env.msg }),
            Request::Kv(cmd, reply) => {
                self.next_id += 1;
                self.kv.insert(self.next_id, reply);
                Some(Input::Client { id: self.next_id, cmd })
            }
            Request::Admin(req, reply) => {
                self.next_id += 1;
                self.admin.insert(self.next_id, reply);
                Some(Input::Admin { id: self.next_id, cluster: req.cluster, op: req.op })
            }
            Request::Naming(entries) => Some(Input::NamingResult { entries }),
            Request::Status(reply) => {
                let _ = reply.send(self.node.status());
                None
            }
            Request::Peer(node, url) => {
                self.peers.set(node, url);
                None
            }
        }
    }

    fn dispatch(&mut self, o: Output) {
        match o {
            Output::Send { to, msg } => self.peers.send(Envelope { from: self.node.id(), to, msg }),
            Output::ClientReply { id, reply } => {
                if let Some(r) = self.kv.remove(&id) {
                    let _ = r.send(reply);
                }
            }
            Output::AdminReply { id, reply } => {
                if let Some(r) = self.admin.remove(&id) {
                    let _ = r.send(reply);
                }
            }
            Output::Register { entry } => {
                let Some(registry) = self.registry.clone() else { return };
                tokio::spawn(async move {
                    if let Err(e) = registry.register(&entry).await {
                        warn!(cluster = %entry.cluster, "registration failed: {e}");
                    }
                });
            }
            Output::NamingLookup { range } => {
                let Some(registry) = self.registry.clone() else { return };
                let tx = self.tx.clone();
                tokio::spawn(async move {
                    match registry.lookup(&range).await {
                        Ok(entries) => {
                            let _ = tx.send(Request::Naming(entries)).await;
                        }
                        Err(e) => warn!(%range, "naming lookup failed: {e}"),
                    }
                });
            }
            Output::Observe { obs } => debug!(node = %self.node.id(), ?obs),
        }
    }
}

/// Outgoing links, one FIFO task per peer address.
struct Peers {
    me: NodeId,
    urls: BTreeMap<NodeId, String>,
    links: BTreeMap<NodeId, (String, mpsc::Sender<Vec<u8>>)>,
}

impl Peers {
    fn new(me: NodeId) -> Self {
        Peers { me, urls: BTreeMap::new(), links: BTreeMap::new() }
    }

    fn set(&mut self, node: NodeId, url: String) {
        if node != self.me {
            self.urls.insert(node, url);
        }
    }

    fn send(&mut self, env: Envelope) {
        let to = env.to;
        let Some(url) = self.urls.get(&to) else {
            debug!(%to, "no address, dropping {}", env.msg.kind());
            return;
        };
        let link = match self.links.get(&to) {
            Some((u, link)) if u == url && !link.is_closed() => link,
            _ => {
                let (tx, rx) = mpsc::channel(LINK_QUEUE);
                let client = match NodeClient::with_timeout(url, Duration::from_secs(5)) {
                    Ok(c) => c,
                    Err(e) => {
                        warn!(%to, "cannot build client: {e}");
                        return;
                    }
                };
                tokio::spawn(link_task(client, rx));
                &self.links.entry(to).insert_entry((url.clone(), tx)).into_mut().1
            }
        };
        if link.try_send(env.encode()).is_err() {
            debug!(%to, "link queue full, dropping");
        }
    }
}

async fn link_task(client: NodeClient, mut rx: mpsc::Receiver<Vec<u8>>) {
    while let Some(mut body) = rx.recv().await {
        while body.len() < BATCH_BYTES {
            match rx.try_recv() {
                Ok(frame) => body.extend_from_slice(&frame),
                Err(_) => break,
            }
        }
        if let Err(e) = client.raft(body).await {
            debug!(peer = client.url(), "send failed: {e}");
        }
    }
}

async fn refresh_addresses(
    registry: RegistryClient,
    me: AddressEntry,
    tx: mpsc::Sender<Request>,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut known: BTreeMap<NodeId, String> = BTreeMap::new();
    loop {
        if let Err(e) = registry.register_address(&me).await {
            debug!("address registration failed: {e}");
        }
        match registry.addresses().await {
            Ok(book) => {
                for (node, url) in book {
                    if known.get(&node) != Some(&url) {
                        known.insert(node, url.clone());
                        if tx.send(Request::Peer(node, url)).await.is_err() {
                            return;
                        }
                    }
                }
            }
            Err(e) => debug!("address refresh failed: {e}"),
        }
        tokio::select! {
            _ = tokio::time::sleep(ADDRESS_REFRESH) => {}
            _ = shutdown.wait_for(|v| *v) => return,
        }
    }
}

#[derive(Clone)]
struct Api {
    tx: mpsc::Sender<Request>,
    kv_timeout: Duration,
    admin_timeout: Duration,
}

impl Api {
    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Request, deadline: Duration) -> Result<T, Failure> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).await.map_err(|_| Failure::unavailable())?;
        match tokio::time::timeout(deadline, rx).await {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(_)) => Err(Failure::unavailable()),
            Err(_) => Err(Failure::timeout()),
        }
    }
}

async fn raft(State(api): State<Api>, body: Bytes) -> Result<StatusCode, Failure> {
    let mut buf = &body[..];
    while !buf.is_empty() {
        let (env, used) = Envelope::decode(buf)
            .map_err(Failure::bad_request)?
            .ok_or_else(|| Failure::bad_request("truncated frame"))?;
        buf = &buf[used..];
        api.tx.send(Request::Raft(env)).await.map_err(|_| Failure::unavailable())?;
    }
    Ok(StatusCode::NO_CONTENT)
}

async fn kv(State(api): State<Api>, Json(cmd): Json<Command>) -> Result<Json<ClientReply>, Failure> {
    let deadline = api.kv_timeout;
    api.ask(|r| Request::Kv(cmd, r), deadline).await.map(Json)
}

async fn admin(State(api): State<Api>, Json(req): Json<AdminRequest>) -> Result<Json<AdminResponse>, Failure> {
    let deadline = api.admin_timeout;
    api.ask(|r| Request::Admin(req, r), deadline).await.map(Json)
}

async fn status(State(api): State<Api>) -> Result<Json<NodeStatus>, Failure> {
    api.ask(Request::Status, Duration::from_secs(5)).await.map(Json)
}

async fn peer(State(api): State<Api>, Json(entry): Json<AddressEntry>) -> Result<StatusCode, Failure> {
    api.tx.send(Request::Peer(entry.node, entry.url)).await.map_err(|_| Failure::unavailable())?;
    Ok(StatusCode::NO_CONTENT)
}
