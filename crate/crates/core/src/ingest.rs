//! Loopback HTTP ingestion endpoint and its blocking client.
//!
//! Routes:
//! - `POST /ingest` with a form-encoded body carrying `node_id`,
//!   `record_id`, `temperature`, `humidity`, `stamped_at`.
//!   `200 inserted`, `200 duplicate`, `400` on parse or range failure,
//!   `409` when the identity is already stored with another payload.
//! - `GET /ids?node=<id>`: newline-terminated ascending ids.
//! - `GET /health`: `200 ok`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;
use thiserror::Error;
use tokio::sync::oneshot;

use crate::model::{make_packet, NodeId, Packet, RecordId, SensorSample, Tenths, Timestamp};
use crate::store::{packet_to_json_line, InsertOutcome, ServerStore, StoreError, StoreKind};

pub const FIELDS: [&str; 5] = ["node_id", "record_id", "temperature", "humidity", "stamped_at"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: io::Error,
    },
    #[error("store file {path}: {source}")]
    Sink {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("runtime: {0}")]
    Runtime(io::Error),
    #[error("request to {url} failed: {message}")]
    Transport { url: String, message: String },
    #[error("server answered {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A status and body as the handlers produce them, independent of HTTP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    fn new(status: u16, body: impl Into<String>) -> Self {
        Reply {
            status,
            body: body.into(),
        }
    }
}

/// Form body for one packet, fields in wire order.
pub fn encode_form(p: &Packet) -> String {
    let s = p.sample();
    url::form_urlencoded::Serializer::new(String::new())
        .append_pair("node_id", p.node_id().as_str())
        .append_pair("record_id", &p.record_id().to_string())
        .append_pair("temperature", &s.temperature().to_string())
        .append_pair("humidity", &s.humidity().to_string())
        .append_pair("stamped_at", &p.stamped_at().to_string())
        .finish()
}

/// Parses and validates a form body into a packet.
pub fn decode_form(body: &[u8]) -> Result<Packet, String> {
    let mut fields: HashMap<String, String> = HashMap::new();
    for (k, v) in url::form_urlencoded::parse(body) {
        if !FIELDS.contains(&k.as_ref()) {
            return Err(format!("unknown field {k:?}"));
        }
        if fields.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("field {k:?} repeated"));
        }
    }
    let field = |name: &str| {
        fields
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| format!("missing field {name:?}"))
    };
    let uint = |name: &str| -> Result<u64, String> {
        let raw = field(name)?;
        if raw.is_empty() || !raw.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("{name} {raw:?} is not a non-negative integer"));
        }
        raw.parse().map_err(|_| format!("{name} {raw:?} out of range"))
    };
    let tenths = |name: &str| -> Result<Tenths, String> {
        let raw = field(name)?;
        raw.parse().map_err(|_| format!("{name} {raw:?} is not a decimal with one fractional digit"))
    };
    let node_id = NodeId::new(field("node_id")?).map_err(|e| e.to_string())?;
    let record_id = uint("record_id")?;
    let sample = SensorSample::new(tenths("temperature")?, tenths("humidity")?).map_err(|e| e.to_string())?;
    let stamped_at = uint("stamped_at")?;
    make_packet(node_id, RecordId(record_id), sample, Timestamp(stamped_at)).map_err(|e| e.to_string())
}

/// Shared state behind the routes. Mutations are serialized by the store's
/// write lock; the optional sink receives one JSONL line per insert.
#[derive(Debug, Clone)]
pub struct IngestState {
    store: Arc<RwLock<ServerStore>>,
    sink: Option<Arc<Mutex<File>>>,
}

impl IngestState {
    pub fn new(store: ServerStore) -> Self {
        IngestState {
            store: Arc::new(RwLock::new(store)),
            sink: None,
        }
    }

    /// Loads `path` if it exists and appends every new insert to it.
    pub fn with_store_file(kind: StoreKind, path: &Path) -> Result<Self, IngestError> {
        let store = if path.exists() {
            ServerStore::import(path, kind)?
        } else {
            ServerStore::new(kind)
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| IngestError::Sink {
                path: path.to_owned(),
                source,
            })?;
        Ok(IngestState {
            store: Arc::new(RwLock::new(store)),
            sink: Some(Arc::new(Mutex::new(file))),
        })
    }

    pub fn snapshot(&self) -> ServerStore {
        self.store.read().unwrap().clone()
    }

    pub fn handle_ingest(&self, body: &[u8]) -> Reply {
        let packet = match decode_form(body) {
            Ok(p) => p,
            Err(msg) => return Reply::new(400, msg),
        };
        let line = packet_to_json_line(&packet);
        let mut store = self.store.write().unwrap();
        match store.insert(packet) {
            Ok(InsertOutcome::Inserted) => {
                if let Some(sink) = &self.sink {
                    let mut f = sink.lock().unwrap();
                    if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                        return Reply::new(500, format!("store file write failed: {e}"));
                    }
                }
                Reply::new(200, "inserted")
            }
            Ok(InsertOutcome::DuplicateIgnored) => Reply::new(200, "duplicate"),
            Err(e) => Reply::new(409, e.to_string()),
        }
    }

    pub fn handle_ids(&self, node: Option<&str>) -> Reply {
        let Some(node) = node else {
            return Reply::new(400, "missing query parameter \"node\"");
        };
        let node = match NodeId::new(node) {
            Ok(n) => n,
            Err(e) => return Reply::new(400, e.to_string()),
        };
        let store = self.store.read().unwrap();
        let ids = store.ids(&node);
        if ids.is_empty() && !store.is_empty() {
            return Reply::new(404, format!("unknown node {node}"));
        }
        let mut body = String::with_capacity(ids.len() * 6);
        for id in ids {
            body.push_str(&id.to_string());
            body.push('\n');
        }
        Reply::new(200, body)
    }
}

fn into_response(r: Reply) -> (StatusCode, String) {
    (
        StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        r.body,
    )
}

async fn ingest(State(st): State<IngestState>, body: Bytes) -> (StatusCode, String) {
    into_response(st.handle_ingest(&body))
}

async fn ids(
    State(st): State<IngestState>,
    Query(params): Query<HashMap<String, String>>,
) -> (StatusCode, String) {
    into_response(st.handle_ids(params.get("node").map(String::as_str)))
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: IngestState) -> Router {
    Router::new()
        .route("/ingest", post(ingest))
        .route("/ids", get(ids))
        .route("/health", get(health))
        .with_state(state)
}

/// A server running on its own thread and runtime.
#[derive(Debug)]
pub struct IngestServer {
    addr: SocketAddr,
    state: IngestState,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl IngestServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts serving.
    pub fn start(state: IngestState, port: u16) -> Result<IngestServer, IngestError> {
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_io()
            .build()
            .map_err(IngestError::Runtime)?;
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|source| IngestError::Bind { addr, source })?;
        let addr = listener.local_addr().map_err(|source| IngestError::Bind { addr, source })?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(state.clone());
        let thread = thread::spawn(move || {
            runtime.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(IngestServer {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &IngestState {
        &self.state
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Stops the server and returns its final store.
    pub fn shutdown(mut self) -> ServerStore {
        self.stop();
        self.state.snapshot()
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for IngestServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Outcome of a successful ingest call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ack {
    Inserted,
    Duplicate,
}

/// Blocking client for an [`IngestServer`].
#[derive(Debug, Clone)]
pub struct IngestClient {
    base: String,
    http: reqwest::blocking::Client,
}

impl IngestClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        IngestClient {
            base: base_url.into(),
            http: reqwest::blocking::Client::new(),
        }
    }

    fn transport(&self, url: &str, e: reqwest::Error) -> IngestError {
        IngestError::Transport {
            url: url.to_owned(),
            message: e.to_string(),
        }
    }

    /// Posts a raw form body and returns status and body as received.
    pub fn post_form(&self, body: &str) -> Result<Reply, IngestError> {
        let url = format!("{}/ingest", self.base);
        let resp = self
            .http
            .post(&url)
            .header("content-type", "application/x-www-form-urlencoded")
            .body(body.to_owned())
            .send()
            .map_err(|e| self.transport(&url, e))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| self.transport(&url, e))?;
        Ok(Reply { status, body })
    }

    pub fn send(&self, p: &Packet) -> Result<Ack, IngestError> {
        let reply = self.post_form(&encode_form(p))?;
        match (reply.status, reply.body.as_str()) {
            (200, "inserted") => Ok(Ack::Inserted),
            (200, "duplicate") => Ok(Ack::Duplicate),
            _ => Err(IngestError::Rejected {
                status: reply.status,
                body: reply.body,
            }),
        }
    }

    pub fn get(&self, path_and_query: &str) -> Result<Reply, IngestError> {
        let url = format!("{}{}", self.base, path_and_query);
        let resp = self.http.get(&url).send().map_err(|e| self.transport(&url, e))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| self.transport(&url, e))?;
        Ok(Reply { status, body })
    }

    pub fn ids(&self, node: &NodeId) -> Result<Vec<RecordId>, IngestError> {
        let query = url::form_urlencoded::Serializer::new(String::new())
            .append_pair("node", node.as_str())
            .finish();
        let reply = self.get(&format!("/ids?{query}"))?;
        if reply.status != 200 {
            return Err(IngestError::Rejected {
                status: reply.status,
                body: reply.body,
            });
        }
        reply
            .body
            .lines()
            .map(|l| {
                l.parse().map(RecordId).map_err(|_| IngestError::Rejected {
                    status: reply.status,
                    body: format!("bad id line {l:?}"),
                })
            })
            .collect()
    }
}
