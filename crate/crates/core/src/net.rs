//! Peer bookkeeping and gossip over an abstract transport.
//!
//! Peers are addressed by their listen address. Node ids are learned from
//! HELLO and used to route replies back to the sender of an envelope.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::Block;
use crate::wire::{
    sign_payload, Envelope, HelloPayload, MessageKind, NewBlockPayload, NodeIdentity, PeersPayload,
    WireError,
};

/// Capacity of the recently-seen block hash caches.
pub const SEEN_CACHE_CAPACITY: usize = 1024;

/// How long a dialed peer may take to answer HELLO.
pub const HANDSHAKE_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {0} unreachable")]
    Unreachable(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Moves whole message bodies to a peer. Implementations frame them as they
/// see fit; a message is delivered intact or not at all, in order per peer.
pub trait Transport {
    fn send(&mut self, to: &str, message: &[u8]) -> Result<(), TransportError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerState {
    Known,
    Connected,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub addr: String,
    pub node_id: Option<String>,
    pub last_seen: u64,
    pub state: PeerState,
    /// When we last sent HELLO without hearing back.
    #[serde(skip)]
    pub dialed_at: Option<u64>,
}

/// Known peers keyed by address. Never contains our own address.
#[derive(Clone, Debug)]
pub struct PeerTable {
    self_addr: String,
    records: BTreeMap<String, PeerRecord>,
}

impl PeerTable {
    pub fn new(self_addr: impl Into<String>) -> Self {
        Self { self_addr: self_addr.into(), records: BTreeMap::new() }
    }

    pub fn self_addr(&self) -> &str {
        &self.self_addr
    }

    /// Inserts `addr` if it is new and not ours. Returns whether it was added.
    pub fn add_peer(&mut self, addr: &str) -> bool {
        if addr == self.self_addr || addr.is_empty() || self.records.contains_key(addr) {
            return false;
        }
        self.records.insert(
            addr.to_owned(),
            PeerRecord {
                addr: addr.to_owned(),
                node_id: None,
                last_seen: 0,
                state: PeerState::Known,
                dialed_at: None,
            },
        );
        true
    }

    pub fn get(&self, addr: &str) -> Option<&PeerRecord> {
        self.records.get(addr)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &PeerRecord> {
        self.records.values()
    }

    pub fn addrs(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    pub fn connected_addrs(&self) -> Vec<String> {
        self.records
            .values()
            .filter(|r| r.state == PeerState::Connected)
            .map(|r| r.addr.clone())
            .collect()
    }

    pub fn connected_count(&self) -> usize {
        self.records.values().filter(|r| r.state == PeerState::Connected).count()
    }

    pub fn addr_for_node(&self, node_id: &str) -> Option<&str> {
        self.records
            .values()
            .find(|r| r.node_id.as_deref() == Some(node_id))
            .map(|r| r.addr.as_str())
    }

    pub fn mark_connected(&mut self, addr: &str, node_id: &str, now: u64) {
        if let Some(r) = self.records.get_mut(addr) {
            r.node_id = Some(node_id.to_owned());
            r.state = PeerState::Connected;
            r.last_seen = now;
            r.dialed_at = None;
        }
    }

    pub fn mark_failed(&mut self, addr: &str) {
        if let Some(r) = self.records.get_mut(addr) {
            r.state = PeerState::Failed;
            r.dialed_at = None;
        }
    }

    pub fn touch(&mut self, node_id: &str, now: u64) {
        if let Some(r) = self.records.values_mut().find(|r| r.node_id.as_deref() == Some(node_id)) {
            r.last_seen = now;
        }
    }

    fn mark_dialed(&mut self, addr: &str, now: u64) {
        if let Some(r) = self.records.get_mut(addr) {
            r.dialed_at = Some(now);
        }
    }

    /// Fails every peer that has not answered HELLO within `timeout`.
    pub fn expire_handshakes(&mut self, now: u64, timeout: u64) -> Vec<String> {
        let mut expired = Vec::new();
        for r in self.records.values_mut() {
            if r.state != PeerState::Connected {
                if let Some(at) = r.dialed_at {
                    if now.saturating_sub(at) >= timeout {
                        r.state = PeerState::Failed;
                        r.dialed_at = None;
                        expired.push(r.addr.clone());
                    }
                }
            }
        }
        expired
    }
}

/// Bounded FIFO set of block hashes.
#[derive(Clone, Debug)]
pub struct SeenCache {
    capacity: usize,
    order: VecDeque<String>,
    members: HashSet<String>,
}

impl Default for SeenCache {
    fn default() -> Self {
        Self::with_capacity(SEEN_CACHE_CAPACITY)
    }
}

impl SeenCache {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), order: VecDeque::new(), members: HashSet::new() }
    }

    /// Records `hash`; false if it was already present.
    pub fn insert(&mut self, hash: &str) -> bool {
        if self.members.contains(hash) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(oldest) = self.order.pop_front() {
                self.members.remove(&oldest);
            }
        }
        self.order.push_back(hash.to_owned());
        self.members.insert(hash.to_owned());
        true
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.members.contains(hash)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// What a HELLO did to the peer table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HelloOutcome {
    /// First contact: we answered with our own HELLO and PEERS.
    NewPeer(String),
    AlreadyConnected(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("HELLO node id does not match its signer")]
    IdentityMismatch,
    #[error("bad payload: {0}")]
    BadPayload(String),
}

/// Peer table plus gossip dedup state for one node.
#[derive(Clone, Debug)]
pub struct Gossip {
    pub table: PeerTable,
    relayed: SeenCache,
}

impl Gossip {
    pub fn new(listen_addr: impl Into<String>) -> Self {
        Self { table: PeerTable::new(listen_addr), relayed: SeenCache::default() }
    }

    fn send_or_fail(&mut self, addr: &str, env: &Envelope, transport: &mut dyn Transport) -> bool {
        match transport.send(addr, &env.to_json_bytes()) {
            Ok(()) => true,
            Err(e) => {
                log::debug!("send to {addr} failed: {e}");
                self.table.mark_failed(addr);
                false
            }
        }
    }

    pub fn hello(&self, identity: &NodeIdentity, now: u64) -> Envelope {
        let payload = HelloPayload {
            listen_addr: self.table.self_addr().to_owned(),
            node_id: identity.node_id().to_owned(),
        };
        sign_payload(MessageKind::Hello, now, &payload, identity)
    }

    fn peers(&self, identity: &NodeIdentity, now: u64) -> Envelope {
        let mut addrs = self.table.addrs();
        addrs.push(self.table.self_addr().to_owned());
        sign_payload(MessageKind::Peers, now, &PeersPayload { addrs }, identity)
    }

    /// Sends HELLO to `addr`, adding it to the table first.
    pub fn start_handshake(&mut self, addr: &str, identity: &NodeIdentity, now: u64, transport: &mut dyn Transport) {
        self.table.add_peer(addr);
        if self.table.get(addr).is_none() {
            return;
        }
        self.table.mark_dialed(addr, now);
        let hello = self.hello(identity, now);
        self.send_or_fail(addr, &hello, transport);
    }

    /// Handles a verified HELLO envelope.
    pub fn on_hello(
        &mut self,
        env: &Envelope,
        identity: &NodeIdentity,
        now: u64,
        transport: &mut dyn Transport,
    ) -> Result<HelloOutcome, NetError> {
        let hello: HelloPayload = env.payload_as().map_err(|e| NetError::BadPayload(e.to_string()))?;
        if hello.node_id != env.sender {
            return Err(NetError::IdentityMismatch);
        }
        let addr = hello.listen_addr;
        if addr == self.table.self_addr() {
            return Err(NetError::BadPayload("HELLO from our own address".into()));
        }
        self.table.add_peer(&addr);
        let already = self.table.get(&addr).map(|r| r.state == PeerState::Connected).unwrap_or(false);
        self.table.mark_connected(&addr, &hello.node_id, now);
        if already {
            return Ok(HelloOutcome::AlreadyConnected(addr));
        }
        let reply = self.hello(identity, now);
        if self.send_or_fail(&addr, &reply, transport) {
            let peers = self.peers(identity, now);
            self.send_or_fail(&addr, &peers, transport);
        }
        Ok(HelloOutcome::NewPeer(addr))
    }

    /// Merges a verified PEERS list and dials addresses we had not heard of.
    pub fn on_peers(
        &mut self,
        env: &Envelope,
        identity: &NodeIdentity,
        now: u64,
        transport: &mut dyn Transport,
    ) -> Result<Vec<String>, NetError> {
        let peers: PeersPayload = env.payload_as().map_err(|e| NetError::BadPayload(e.to_string()))?;
        let mut fresh = Vec::new();
        for addr in peers.addrs {
            if self.table.add_peer(&addr) {
                fresh.push(addr);
            }
        }
        for addr in &fresh {
            self.start_handshake(addr, identity, now, transport);
        }
        Ok(fresh)
    }

    /// Sends NEW_BLOCK to every connected peer except `except`, at most once
    /// per block hash. Returns the number of successful sends.
    pub fn broadcast_block(
        &mut self,
        block: &Block,
        except: Option<&str>,
        identity: &NodeIdentity,
        now: u64,
        transport: &mut dyn Transport,
    ) -> usize {
        if !self.relayed.insert(&block.hash) {
            return 0;
        }
        let env = sign_payload(MessageKind::NewBlock, now, &NewBlockPayload { block: block.clone() }, identity);
        self.send_to_connected(&env, except, transport)
    }

    /// Sends `env` to every connected peer except `except`.
    pub fn send_to_connected(&mut self, env: &Envelope, except: Option<&str>, transport: &mut dyn Transport) -> usize {
        let targets: Vec<String> = self
            .table
            .connected_addrs()
            .into_iter()
            .filter(|a| Some(a.as_str()) != except)
            .collect();
        targets.iter().filter(|addr| self.send_or_fail(addr, env, transport)).count()
    }

    pub fn send(&mut self, addr: &str, env: &Envelope, transport: &mut dyn Transport) -> bool {
        self.send_or_fail(addr, env, transport)
    }
}
