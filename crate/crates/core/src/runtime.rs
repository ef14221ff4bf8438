//! TCP driver for a [`Node`], and a small blocking client.
//!
//! One command loop thread owns the node. Connection reader threads, mining
//! threads and a ticker feed it [`Command`]s over a channel, so every chain
//! mutation is serialized while mining never holds up queries. Peers and
//! clients share one listener; each frame is `[u32 BE length][envelope JSON]`.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use thiserror::Error;

use crate::chain::{Block, ChainParams};
use crate::consensus::mine_block;
use crate::net::{Transport, TransportError, HANDSHAKE_TIMEOUT_MS};
use crate::node::{Node, NodeError, NodeEvent, QueryRequest, QueryResponse, Ticket, TxEnvelopePayload, TxPayload};
use crate::store::{BlockStore, StoreError};
use crate::wire::{decode_envelope, read_frame, sign_payload, write_frame, Envelope, MessageKind, NodeIdentity, WireError};

const POLL: Duration = Duration::from_millis(50);
const TICK: Duration = Duration::from_secs(1);

#[derive(Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub key_path: PathBuf,
    pub listen_addr: String,
    pub peers: Vec<String>,
    pub db_path: PathBuf,
    pub params: ChainParams,
    pub mining: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("network: {0}")]
    Network(#[source] io::Error),
    #[error("store: {0}")]
    Store(#[from] StoreError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Network(_) => 3,
            Self::Store(_) => 4,
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

enum Reply {
    Frame(Vec<u8>),
    Nothing,
    Close,
}

enum Command {
    Inbound { bytes: Vec<u8>, reply: Sender<Reply> },
    Mined { job: u64, block: Block },
    Tick,
}

/// Sends frames over cached outbound connections, dialing on demand.
struct TcpTransport {
    conns: HashMap<String, TcpStream>,
}

impl TcpTransport {
    fn dial(addr: &str) -> Result<TcpStream, TransportError> {
        let timeout = Duration::from_millis(HANDSHAKE_TIMEOUT_MS);
        let targets: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut last = None;
        for target in targets {
            match TcpStream::connect_timeout(&target, timeout) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    s.set_write_timeout(Some(timeout))?;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        log::debug!("dial {addr} failed: {last:?}");
        Err(TransportError::Unreachable(addr.to_owned()))
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, to: &str, message: &[u8]) -> Result<(), TransportError> {
        if let Some(stream) = self.conns.get_mut(to) {
            if write_frame(stream, message).is_ok() {
                return Ok(());
            }
            self.conns.remove(to);
        }
        let mut stream = Self::dial(to)?;
        write_frame(&mut stream, message)?;
        self.conns.insert(to.to_owned(), stream);
        Ok(())
    }
}

/// A node running on background threads.
pub struct NodeHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    main: Option<JoinHandle<Result<(), RunError>>>,
}

impl NodeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    /// Blocks until the node stops, either by [`NodeHandle::stop`] or the
    /// shutdown flag.
    pub fn join(mut self) -> Result<(), RunError> {
        let result = self.main.take().expect("joined once").join().unwrap_or(Ok(()));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        result
    }

    pub fn stop(self) -> Result<(), RunError> {
        self.shutdown.store(true, Ordering::SeqCst);
        self.join()
    }
}

/// Opens the store, binds the listener, handshakes with bootstrap peers and
/// serves on background threads until the returned handle is stopped.
pub fn start_node(config: NodeConfig) -> Result<NodeHandle, RunError> {
    config.params.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let identity = NodeIdentity::load_or_create(&config.key_path)
        .map_err(|e| RunError::Config(format!("key file {}: {e}", config.key_path.display())))?;
    let store = BlockStore::open(&config.db_path)?;
    let listener = TcpListener::bind(&config.listen_addr).map_err(RunError::Network)?;
    let addr = listener.local_addr().map_err(RunError::Network)?;
    listener.set_nonblocking(true).map_err(RunError::Network)?;
    let mut node = match Node::new(identity, addr.to_string(), config.params.clone(), store) {
        Ok(n) => n,
        Err(NodeError::Store(e)) => return Err(RunError::Store(e)),
        Err(e) => return Err(RunError::Config(e.to_string())),
    };
    log::info!("node {} listening on {addr}, chain length {}", node.node_id(), node.store().get_block_count());

    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let accepted: Connections = Arc::default();
    let mut threads = Vec::new();

    {
        let (tx, shutdown, accepted) = (tx.clone(), shutdown.clone(), accepted.clone());
        threads.push(thread::spawn(move || accept_loop(listener, tx, shutdown, accepted)));
    }
    {
        let (tx, shutdown) = (tx.clone(), shutdown.clone());
        threads.push(thread::spawn(move || {
            while !shutdown.load(Ordering::SeqCst) {
                thread::sleep(TICK);
                if tx.send(Command::Tick).is_err() {
                    return;
                }
            }
        }));
    }

    let mut transport = TcpTransport { conns: HashMap::new() };
    let now = now_ms();
    for peer in &config.peers {
        node.connect(peer, now, &mut transport);
        node.request_sync(peer, now, &mut transport);
    }

    let main = {
        let shutdown = shutdown.clone();
        thread::spawn(move || {
            let result = command_loop(&mut node, &config, transport, rx, tx, &shutdown);
            shutdown.store(true, Ordering::SeqCst);
            for (_, s) in accepted.lock().unwrap().drain() {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
            let synced = node.store().sync().map_err(RunError::from);
            result.and(synced)
        })
    };
    Ok(NodeHandle { addr, shutdown, threads, main: Some(main) })
}

/// Runs a node in the foreground until `shutdown` is set.
pub fn run_node(config: NodeConfig, shutdown: Arc<AtomicBool>) -> Result<(), RunError> {
    let handle = start_node(config)?;
    while !shutdown.load(Ordering::SeqCst) && !handle.shutdown.load(Ordering::SeqCst) {
        thread::sleep(POLL);
    }
    handle.stop()
}

/// Open inbound connections, so shutdown can close them.
type Connections = Arc<Mutex<HashMap<u64, TcpStream>>>;

fn accept_loop(listener: TcpListener, tx: Sender<Command>, shutdown: Arc<AtomicBool>, accepted: Connections) {
    let mut next_id = 0u64;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                next_id += 1;
                let id = next_id;
                if let Ok(clone) = stream.try_clone() {
                    accepted.lock().unwrap().insert(id, clone);
                }
                let (tx, accepted) = (tx.clone(), accepted.clone());
                thread::spawn(move || {
                    serve_connection(&stream, peer, tx);
                    accepted.lock().unwrap().remove(&id);
                    let _ = stream.shutdown(std::net::Shutdown::Both);
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn serve_connection(mut stream: &TcpStream, peer: SocketAddr, tx: Sender<Command>) {
    loop {
        let bytes = match read_frame(&mut stream) {
            Ok(Some(b)) => b,
            Ok(None) => return,
            Err(e) => {
                log::debug!("connection from {peer}: {e}");
                return;
            }
        };
        let (reply_tx, reply_rx) = mpsc::channel();
        if tx.send(Command::Inbound { bytes, reply: reply_tx }).is_err() {
            return;
        }
        match reply_rx.recv() {
            Ok(Reply::Frame(body)) => {
                if write_frame(&mut stream, &body).is_err() {
                    return;
                }
            }
            Ok(Reply::Nothing) => {}
            Ok(Reply::Close) | Err(_) => {
                log::debug!("closing connection from {peer}");
                return;
            }
        }
    }
}

fn command_loop(
    node: &mut Node,
    config: &NodeConfig,
    mut transport: TcpTransport,
    rx: Receiver<Command>,
    tx: Sender<Command>,
    shutdown: &AtomicBool,
) -> Result<(), RunError> {
    let mut waiting: HashMap<Ticket, Sender<Reply>> = HashMap::new();
    let mut jobs: HashMap<u64, Arc<AtomicBool>> = HashMap::new();
    while !shutdown.load(Ordering::SeqCst) {
        let command = match rx.recv_timeout(POLL) {
            Ok(c) => c,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let now = now_ms();
        match command {
            Command::Tick => node.tick(now),
            Command::Mined { job, block } => {
                jobs.remove(&job);
                node.on_mined(job, block, now, &mut transport);
            }
            Command::Inbound { bytes, reply } => {
                let env = match decode_envelope(&bytes) {
                    Ok(env) => env,
                    Err(_) => {
                        // Counts the bad envelope.
                        node.on_message(&bytes, now, &mut transport);
                        let _ = reply.send(Reply::Close);
                        continue;
                    }
                };
                if env.kind == MessageKind::Tx {
                    let result = env
                        .payload_as::<TxEnvelopePayload>()
                        .map_err(|e| e.to_string())
                        .and_then(|p| {
                            if config.mining {
                                node.submit_tx(p.tx, now).map_err(|e| e.to_string())
                            } else {
                                Err("mining is disabled on this node".to_owned())
                            }
                        });
                    match result {
                        Ok(ticket) => {
                            waiting.insert(ticket, reply);
                        }
                        Err(e) => {
                            let resp = node.sign(MessageKind::Response, &QueryResponse::err("tx", e), now);
                            let _ = reply.send(Reply::Frame(resp.to_json_bytes()));
                        }
                    }
                } else {
                    let out = node.on_envelope(env, now, &mut transport);
                    let _ = reply.send(out.map_or(Reply::Nothing, |e| Reply::Frame(e.to_json_bytes())));
                }
            }
        }
        for event in node.drain_events() {
            match event {
                NodeEvent::StartMining { job, block } => {
                    let cancel = Arc::new(AtomicBool::new(false));
                    jobs.insert(job, cancel.clone());
                    let tx = tx.clone();
                    thread::spawn(move || {
                        if let Ok(mined) = mine_block(block, &cancel) {
                            let _ = tx.send(Command::Mined { job, block: mined.block });
                        }
                    });
                }
                NodeEvent::CancelMining { job } => {
                    if let Some(flag) = jobs.remove(&job) {
                        flag.store(true, Ordering::SeqCst);
                    }
                }
                NodeEvent::Committed { ticket, index, hash } => {
                    if let Some(reply) = waiting.remove(&ticket) {
                        let resp = QueryResponse::ok("tx", json!({"block_index": index, "block_hash": hash}));
                        let _ = reply.send(Reply::Frame(node.sign(MessageKind::Response, &resp, now).to_json_bytes()));
                    }
                }
                NodeEvent::TxFailed { ticket, error } => {
                    if let Some(reply) = waiting.remove(&ticket) {
                        let resp = QueryResponse::err("tx", error);
                        let _ = reply.send(Reply::Frame(node.sign(MessageKind::Response, &resp, now).to_json_bytes()));
                    }
                }
            }
        }
    }
    for flag in jobs.values() {
        flag.store(true, Ordering::SeqCst);
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {0}: {1}")]
    Connect(String, #[source] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("connection closed without a response")]
    NoResponse,
    #[error("unexpected {0:?} reply")]
    Unexpected(MessageKind),
}

/// Blocking request/response client with a throwaway identity.
pub struct Client {
    stream: TcpStream,
    identity: NodeIdentity,
}

impl Client {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let stream = addr
            .to_socket_addrs()
            .map_err(|e| ClientError::Connect(addr.to_owned(), e))?
            .next()
            .ok_or_else(|| ClientError::Connect(addr.to_owned(), io::ErrorKind::NotFound.into()))
            .and_then(|a| TcpStream::connect_timeout(&a, timeout).map_err(|e| ClientError::Connect(addr.to_owned(), e)))?;
        stream.set_read_timeout(Some(timeout)).map_err(WireError::Io)?;
        Ok(Self { stream, identity: NodeIdentity::generate() })
    }

    /// Sends `env` and waits for one reply envelope.
    pub fn round_trip(&mut self, env: &Envelope) -> Result<Envelope, ClientError> {
        write_frame(&mut self.stream, &env.to_json_bytes())?;
        let body = read_frame(&mut self.stream)?.ok_or(ClientError::NoResponse)?;
        Ok(decode_envelope(&body)?)
    }

    fn response(&mut self, kind: MessageKind, payload: &impl serde::Serialize) -> Result<QueryResponse, ClientError> {
        let env = sign_payload(kind, now_ms(), payload, &self.identity);
        let reply = self.round_trip(&env)?;
        if reply.kind != MessageKind::Response {
            return Err(ClientError::Unexpected(reply.kind));
        }
        Ok(reply.payload_as()?)
    }

    pub fn query(&mut self, what: &str, params: Value) -> Result<QueryResponse, ClientError> {
        self.response(MessageKind::Query, &QueryRequest { what: what.to_owned(), params })
    }

    pub fn submit(&mut self, tx: TxPayload) -> Result<QueryResponse, ClientError> {
        self.response(MessageKind::Tx, &TxEnvelopePayload { tx })
    }

    pub fn ping(&mut self) -> Result<(), ClientError> {
        let env = sign_payload(MessageKind::Ping, now_ms(), &json!({}), &self.identity);
        match self.round_trip(&env)?.kind {
            MessageKind::Pong => Ok(()),
            other => Err(ClientError::Unexpected(other)),
        }
    }
}
