//! The naming registry and node address book.
//!
//! Both live in one directory: `naming.json` holds the cluster entries and
//! `addresses.json` the URL of every node that has announced itself.

use crate::{stopped, Failure, Handle, ServerError};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::routing::get;
use axum::{Json, Router};
use recraft_client::api::{AddressEntry, LookupQuery};
use recraft_core::ids::NodeId;
use recraft_core::message::NamingEntry;
use recraft_core::range::KeyRange;
use recraft_core::recovery::FileRegistry;
use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tracing::{error, info};

#[derive(Clone, Debug)]
pub struct RegistryConfig {
    pub dir: PathBuf,
    pub listen: SocketAddr,
}

impl RegistryConfig {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RegistryConfig { dir: dir.into(), listen: SocketAddr::from(([127, 0, 0, 1], 0)) }
    }
}

#[derive(Debug)]
struct AddressBook {
    path: PathBuf,
    entries: BTreeMap<NodeId, String>,
}

impl AddressBook {
    fn open(path: &Path) -> io::Result<Self> {
        let entries = match std::fs::read(path) {
            Ok(bytes) => {
                let list: Vec<AddressEntry> = serde_json::from_slice(&bytes).map_err(io::Error::other)?;
                list.into_iter().map(|a| (a.node, a.url)).collect()
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        Ok(AddressBook { path: path.to_path_buf(), entries })
    }

    fn list(&self) -> Vec<AddressEntry> {
        self.entries.iter().map(|(n, u)| AddressEntry { node: *n, url: u.clone() }).collect()
    }

    fn set(&mut self, entry: AddressEntry) -> io::Result<()> {
        if self.entries.get(&entry.node) == Some(&entry.url) {
            return Ok(());
        }
        self.entries.insert(entry.node, entry.url);
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.list()).map_err(io::Error::other)?)?;
        std::fs::rename(tmp, &self.path)
    }
}

#[derive(Clone)]
struct Registry {
    naming: Arc<Mutex<FileRegistry>>,
    book: Arc<Mutex<AddressBook>>,
}

pub async fn start(cfg: RegistryConfig) -> Result<Handle, ServerError> {
    std::fs::create_dir_all(&cfg.dir)?;
    let state = Registry {
        naming: Arc::new(Mutex::new(FileRegistry::open(cfg.dir.join("naming.json"))?)),
        book: Arc::new(Mutex::new(AddressBook::open(&cfg.dir.join("addresses.json"))?)),
    };
    let app = Router::new()
        .route("/v1/naming", get(list).post(register))
        .route("/v1/naming/lookup", get(lookup))
        .route("/v1/addresses", get(addresses).post(set_address))
        .with_state(state);
    let listener = TcpListener::bind(cfg.listen).await?;
    let addr = listener.local_addr()?;
    let (shutdown, rx) = watch::channel(false);
    let serve = axum::serve(listener, app).with_graceful_shutdown(stopped(rx));
    let task = tokio::spawn(async move {
        if let Err(e) = serve.await {
            error!("registry server failed: {e}");
        }
    });
    let url = format!("http://{addr}");
    info!(%url, dir = %cfg.dir.display(), "registry serving");
    Ok(Handle { addr, url, shutdown, tasks: vec![task] })
}

async fn register(State(r): State<Registry>, Json(entry): Json<NamingEntry>) -> Result<StatusCode, Failure> {
    r.naming.lock().expect("registry lock").register(entry).map_err(Failure::internal)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list(State(r): State<Registry>) -> Json<Vec<NamingEntry>> {
    Json(r.naming.lock().expect("registry lock").registry().list().cloned().collect())
}

async fn lookup(State(r): State<Registry>, Query(q): Query<LookupQuery>) -> Result<Json<Vec<NamingEntry>>, Failure> {
    let range: KeyRange = q.range.parse().map_err(Failure::bad_request)?;
    Ok(Json(r.naming.lock().expect("registry lock").registry().lookup_range(&range)))
}

async fn addresses(State(r): State<Registry>) -> Json<Vec<AddressEntry>> {
    Json(r.book.lock().expect("address lock").list())
}

async fn set_address(State(r): State<Registry>, Json(entry): Json<AddressEntry>) -> Result<StatusCode, Failure> {
    r.book.lock().expect("address lock").set(entry).map_err(Failure::internal)?;
    Ok(StatusCode::NO_CONTENT)
}
