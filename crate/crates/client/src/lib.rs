//! Client for ReCraft nodes and the naming registry.
//!
//! [`NodeClient`] and [`RegistryClient`] map one-to-one onto the HTTP
//! endpoints in [`api`]. [`KvClient`] routes key-value operations to the
//! cluster that owns each key and follows leader hints and redirects.
//! [`AdminClient`] finds a cluster's leader and runs reconfigurations there.

pub mod api;

use api::{AddressEntry, AdminRequest, AdminResponse, ApiError};
use recraft_core::ids::{ClusterId, NodeId};
use recraft_core::kv::{ClientId, Command, KvOp, KvResult, Value};
use recraft_core::message::NamingEntry;
use recraft_core::node::{AdminError, AdminOp, AdminOutcome, ClientReply, NodeStatus, Role};
use recraft_core::range::{Key, KeyRange};
use recraft_core::recovery::NamingRegistry;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::collections::BTreeMap;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("{url} answered {status}: {message}")]
    Status { url: String, status: StatusCode, message: String },
    #[error("no cluster owns key {0}")]
    NoOwner(Key),
    #[error("no address known for node {0}")]
    NoAddress(NodeId),
    #[error("cluster {0} is not in the naming registry")]
    UnknownCluster(ClusterId),
    #[error("no leader found for cluster {0}")]
    NoLeader(ClusterId),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error(transparent)]
    Admin(#[from] AdminError),
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

fn trim(url: &str) -> String {
    url.trim_end_matches('/').to_string()
}

async fn decode<T: DeserializeOwned>(url: &str, resp: reqwest::Response) -> Result<T> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json().await?);
    }
    let message = match resp.json::<ApiError>().await {
        Ok(e) => e.error,
        Err(_) => status.canonical_reason().unwrap_or("error").to_string(),
    };
    Err(ClientError::Status { url: url.to_string(), status, message })
}

async fn expect_empty(url: &str, resp: reqwest::Response) -> Result<()> {
    let status = resp.status();
    if status.is_success() {
        return Ok(());
    }
    let message = resp.json::<ApiError>().await.map(|e| e.error).unwrap_or_default();
    Err(ClientError::Status { url: url.to_string(), status, message })
}

fn http() -> reqwest::Client {
    reqwest::Client::builder().timeout(Duration::from_secs(60)).build().expect("client builds with default settings")
}

/// One node's HTTP endpoints.
#[derive(Clone, Debug)]
pub struct NodeClient {
    http: reqwest::Client,
    base: String,
}

impl NodeClient {
    pub fn new(base: &str) -> Self {
        NodeClient { http: http(), base: trim(base) }
    }

    /// A client whose requests give up after `timeout`.
    pub fn with_timeout(base: &str, timeout: Duration) -> Result<Self> {
        let http = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(NodeClient { http, base: trim(base) })
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let resp = self.http.post(&url).json(body).send().await?;
        decode(&url, resp).await
    }

    pub async fn status(&self) -> Result<NodeStatus> {
        let url = format!("{}/v1/status", self.base);
        let resp = self.http.get(&url).send().await?;
        decode(&url, resp).await
    }

    pub async fn kv(&self, cmd: &Command) -> Result<ClientReply> {
        self.post("/v1/kv", cmd).await
    }

    pub async fn admin(&self, req: &AdminRequest) -> Result<AdminResponse> {
        self.post("/v1/admin", req).await
    }

    pub async fn add_peer(&self, entry: &AddressEntry) -> Result<()> {
        let url = format!("{}/v1/peers", self.base);
        let resp = self.http.post(&url).json(entry).send().await?;
        expect_empty(&url, resp).await
    }

    /// Posts an already framed envelope.
    pub async fn raft(&self, frame: Vec<u8>) -> Result<()> {
        let url = format!("{}/v1/raft", self.base);
        let resp = self
            .http
            .post(&url)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(frame)
            .send()
            .await?;
        expect_empty(&url, resp).await
    }
}

/// The naming registry and address book.
#[derive(Clone, Debug)]
pub struct RegistryClient {
    http: reqwest::Client,
    base: String,
}

impl RegistryClient {
    pub fn new(base: &str) -> Self {
        RegistryClient { http: http(), base: trim(base) }
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    pub async fn register(&self, entry: &NamingEntry) -> Result<()> {
        let url = format!("{}/v1/naming", self.base);
        let resp = self.http.post(&url).json(entry).send().await?;
        expect_empty(&url, resp).await
    }

    pub async fn list(&self) -> Result<Vec<NamingEntry>> {
        let url = format!("{}/v1/naming", self.base);
        let resp = self.http.get(&url).send().await?;
        decode(&url, resp).await
    }

    pub async fn lookup(&self, range: &KeyRange) -> Result<Vec<NamingEntry>> {
        let url = format!("{}/v1/naming/lookup", self.base);
        let resp = self.http.get(&url).query(&[("range", String::from(range.clone()))]).send().await?;
        decode(&url, resp).await
    }

    pub async fn entry(&self, cluster: ClusterId) -> Result<NamingEntry> {
        self.list().await?.into_iter().find(|e| e.cluster == cluster).ok_or(ClientError::UnknownCluster(cluster))
    }

    pub async fn register_address(&self, entry: &AddressEntry) -> Result<()> {
        let url = format!("{}/v1/addresses", self.base);
        let resp = self.http.post(&url).json(entry).send().await?;
        expect_empty(&url, resp).await
    }

    pub async fn addresses(&self) -> Result<BTreeMap<NodeId, String>> {
        let url = format!("{}/v1/addresses", self.base);
        let resp = self.http.get(&url).send().await?;
        let list: Vec<AddressEntry> = decode(&url, resp).await?;
        Ok(list.into_iter().map(|a| (a.node, a.url)).collect())
    }
}

/// Which cluster serves which keys, with the last leader seen for each.
///
/// Registry entries may overlap while a reconfiguration is still being
/// reported; a key goes to the newest-epoch cluster whose range holds it.
#[derive(Clone, Debug, Default)]
pub struct RouteTable {
    naming: NamingRegistry,
    leaders: BTreeMap<ClusterId, NodeId>,
}

impl RouteTable {
    pub fn from_entries(entries: impl IntoIterator<Item = NamingEntry>) -> Self {
        let mut naming = NamingRegistry::default();
        for e in entries {
            naming.register(e);
        }
        RouteTable { naming, leaders: BTreeMap::new() }
    }

    pub fn route(&self, key: &Key) -> Option<&NamingEntry> {
        self.naming.owner(key)
    }

    pub fn leader(&self, cluster: ClusterId) -> Option<NodeId> {
        self.leaders.get(&cluster).copied()
    }

    pub fn set_leader(&mut self, cluster: ClusterId, leader: Option<NodeId>) {
        match leader {
            Some(l) => self.leaders.insert(cluster, l),
            None => self.leaders.remove(&cluster),
        };
    }

    pub fn entries(&self) -> impl Iterator<Item = &NamingEntry> {
        self.naming.list()
    }
}

/// Key-value operations routed through the naming registry.
pub struct KvClient {
    registry: RegistryClient,
    client: ClientId,
    seq: u64,
    routes: RouteTable,
    addresses: BTreeMap<NodeId, String>,
    pub max_attempts: usize,
    pub backoff: Duration,
}

impl KvClient {
    /// A client with a random session id.
    pub fn new(registry: RegistryClient) -> Self {
        KvClient::with_id(registry, ClientId(rand::random::<u64>() >> 1))
    }

    pub fn with_id(registry: RegistryClient, client: ClientId) -> Self {
        KvClient {
            registry,
            client,
            seq: 0,
            routes: RouteTable::default(),
            addresses: BTreeMap::new(),
            max_attempts: 40,
            backoff: Duration::from_millis(100),
        }
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub async fn refresh(&mut self) -> Result<()> {
        let leaders = std::mem::take(&mut self.routes.leaders);
        self.routes = RouteTable::from_entries(self.registry.list().await?);
        self.routes.leaders = leaders;
        self.addresses = self.registry.addresses().await?;
        Ok(())
    }

    pub async fn put(&mut self, key: &str, value: &str) -> Result<Option<Value>> {
        self.value(KvOp::Put { key: key.into(), value: value.into() }).await
    }

    pub async fn get(&mut self, key: &str) -> Result<Option<Value>> {
        self.value(KvOp::Get { key: key.into() }).await
    }

    pub async fn delete(&mut self, key: &str) -> Result<Option<Value>> {
        self.value(KvOp::Delete { key: key.into() }).await
    }

    async fn value(&mut self, op: KvOp) -> Result<Option<Value>> {
        match self.execute(op).await? {
            KvResult::Ok { value } => Ok(value),
            other => Err(ClientError::Exhausted { attempts: 1, last: format!("{other:?}") }),
        }
    }

    /// Runs one operation to completion, retrying across leaders and clusters.
    pub async fn execute(&mut self, op: KvOp) -> Result<KvResult> {
        self.seq += 1;
        let cmd = Command { client: self.client, seq: self.seq, op };
        let key = cmd.op.key().clone();
        if self.routes.route(&key).is_none() {
            self.refresh().await?;
        }
        let mut last = String::from("no attempt made");
        for attempt in 0..self.max_attempts {
            let Some(entry) = self.routes.route(&key).cloned() else {
                self.refresh().await?;
                if self.routes.route(&key).is_none() {
                    return Err(ClientError::NoOwner(key));
                }
                continue;
            };
            let members: Vec<NodeId> = entry.members.iter().copied().collect();
            let target = self.routes.leader(entry.cluster).unwrap_or(members[attempt % members.len()]);
            let Some(url) = self.addresses.get(&target).cloned() else {
                self.refresh().await?;
                if !self.addresses.contains_key(&target) {
                    self.routes.set_leader(entry.cluster, members.get((attempt + 1) % members.len()).copied());
                    last = ClientError::NoAddress(target).to_string();
                }
                continue;
            };
            match NodeClient::new(&url).kv(&cmd).await {
                Ok(ClientReply::Done { result: KvResult::WrongShard }) | Ok(ClientReply::WrongShard { .. }) => {
                    last = format!("{target} does not serve {key}");
                    self.routes.set_leader(entry.cluster, None);
                    tokio::time::sleep(self.backoff).await;
                    self.refresh().await?;
                }
                Ok(ClientReply::Done { result }) => {
                    self.routes.set_leader(entry.cluster, Some(target));
                    return Ok(result);
                }
                Ok(ClientReply::NotLeader { hint }) => {
                    last = format!("{target} is not the leader");
                    let next =
                        hint.filter(|h| *h != target).or_else(|| members.get((attempt + 1) % members.len()).copied());
                    self.routes.set_leader(entry.cluster, next);
                    if hint.is_none() {
                        tokio::time::sleep(self.backoff).await;
                    }
                }
                Ok(ClientReply::Busy) => {
                    last = format!("cluster {} is reconfiguring", entry.cluster);
                    tokio::time::sleep(self.backoff).await;
                    self.refresh().await?;
                }
                Err(e) => {
                    last = e.to_string();
                    self.routes.set_leader(entry.cluster, members.get((attempt + 1) % members.len()).copied());
                    tokio::time::sleep(self.backoff).await;
                }
            }
        }
        Err(ClientError::Exhausted { attempts: self.max_attempts, last })
    }
}

/// Runs reconfigurations at a cluster's leader.
pub struct AdminClient {
    registry: RegistryClient,
    pub max_attempts: usize,
    pub backoff: Duration,
}

impl AdminClient {
    pub fn new(registry: RegistryClient) -> Self {
        AdminClient { registry, max_attempts: 30, backoff: Duration::from_millis(200) }
    }

    pub fn registry(&self) -> &RegistryClient {
        &self.registry
    }

    /// Status of every member of `cluster` that answers, by node.
    pub async fn statuses(&self, cluster: ClusterId) -> Result<BTreeMap<NodeId, Result<NodeStatus>>> {
        let entry = self.registry.entry(cluster).await?;
        let addresses = self.registry.addresses().await?;
        let mut out = BTreeMap::new();
        for n in entry.members {
            let status = match addresses.get(&n) {
                Some(url) => NodeClient::new(url).status().await,
                None => Err(ClientError::NoAddress(n)),
            };
            out.insert(n, status);
        }
        Ok(out)
    }

    /// The member of `cluster` that currently leads it.
    pub async fn leader(&self, cluster: ClusterId) -> Result<(NodeId, NodeClient)> {
        for _ in 0..self.max_attempts {
            let entry = self.registry.entry(cluster).await?;
            let addresses = self.registry.addresses().await?;
            for n in &entry.members {
                let Some(url) = addresses.get(n) else { continue };
                let node = NodeClient::new(url);
                if let Ok(s) = node.status().await {
                    if s.role == Role::Leader && s.cluster == Some(cluster) {
                        return Ok((*n, node));
                    }
                }
            }
            tokio::time::sleep(self.backoff).await;
        }
        Err(ClientError::NoLeader(cluster))
    }

    /// Sends `op` to the leader of `cluster`, following leadership changes
    /// until the leader accepts or refuses it.
    pub async fn run(&self, cluster: ClusterId, op: AdminOp) -> Result<AdminOutcome> {
        let req = AdminRequest { cluster: Some(cluster), op };
        let mut last = String::new();
        for _ in 0..self.max_attempts {
            let (_, node) = self.leader(cluster).await?;
            match node.admin(&req).await? {
                Ok(outcome) => return Ok(outcome),
                Err(AdminError::NotLeader { .. }) => {
                    last = "leadership moved".into();
                    tokio::time::sleep(self.backoff).await;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(ClientError::Exhausted { attempts: self.max_attempts, last })
    }
}
