//! Request and response bodies of the HTTP interface.
//!
//! Node endpoints:
//!
//! ```text
//! POST /v1/raft     framed Envelope (application/octet-stream)  -> 204
//! POST /v1/kv       Command                                      -> ClientReply
//! POST /v1/admin    AdminRequest                                 -> AdminResponse
//! GET  /v1/status                                                -> NodeStatus
//! POST /v1/peers    AddressEntry                                 -> 204
//! ```
//!
//! Registry endpoints:
//!
//! ```text
//! POST /v1/naming                     NamingEntry   -> 204
//! GET  /v1/naming                                   -> [NamingEntry]
//! GET  /v1/naming/lookup?range=a:m                  -> [NamingEntry]
//! POST /v1/addresses                  AddressEntry  -> 204
//! GET  /v1/addresses                                -> [AddressEntry]
//! ```
//!
//! Errors come back as a non-2xx status with an [`ApiError`] body.

use recraft_core::ids::{ClusterId, NodeId};
use recraft_core::node::{AdminError, AdminOp, AdminOutcome};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminRequest {
    /// The cluster the operator means; a node leading another cluster refuses.
    #[serde(default)]
    pub cluster: Option<ClusterId>,
    pub op: AdminOp,
}

pub type AdminResponse = Result<AdminOutcome, AdminError>;

/// Where a node listens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressEntry {
    pub node: NodeId,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupQuery {
    pub range: String,
}
