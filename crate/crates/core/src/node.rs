//! The node state machine.
//!
//! A [`Node`] owns one replica: its store, retarget state, peers and contract
//! cache. It performs no I/O of its own. Drivers feed it envelopes, client
//! submissions and mining results together with the current time, hand it a
//! [`Transport`] for outgoing messages, and act on the [`NodeEvent`]s it
//! queues (start or cancel a mining job, report a committed transaction).
//! The TCP runtime and the simulator are two such drivers.
//!
//! Locally submitted transactions go through create → mine → verify → store
//! → broadcast → execute → persist, in that order.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::chain::{genesis_block, is_hash_hex, Block, ChainParams, ChainError, FIELD_SEPARATOR};
use crate::consensus::{
    choose_chain, create_new_block, mine_block, verify_block, ChainChoice, ChainChoiceError,
    DifficultyState, VerifyError,
};
use crate::contracts::{compile, contract_id, ContractCache, ExecError, Interpreter};
use crate::net::{Gossip, Transport, HANDSHAKE_TIMEOUT_MS};
use crate::store::{BlockStore, StateCommit, StateWrite, StoreError};
use crate::wire::{
    canonical_json_string, decode_envelope, sign_payload, BlocksPayload, Envelope, GetBlocksPayload,
    MessageKind, NewBlockPayload, NodeIdentity,
};

pub type Ticket = u64;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Params(#[from] ChainError),
    #[error("stored chain does not start at our genesis block")]
    ForeignGenesis,
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error("transaction failed: {0}")]
    Failed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TxError {
    #[error("payload contains the 0x1F field separator")]
    Separator,
    #[error("contract does not compile: {0}")]
    Compile(ExecError),
    #[error("unknown contract {0}")]
    UnknownContract(String),
}

/// A client transaction. Its canonical JSON becomes the block's `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxPayload {
    Raw { data: String },
    Deploy { contract: Value },
    Call {
        contract_id: String,
        #[serde(default)]
        args: Vec<i64>,
    },
}

impl TxPayload {
    pub fn block_data(&self) -> String {
        let value = serde_json::to_value(self).expect("payload serializes");
        // Deploy sources are validated integral by compile; the rest is
        // strings and i64s.
        canonical_json_string(&value).unwrap_or_else(|_| value.to_string())
    }

    pub fn from_block_data(data: &str) -> Option<Self> {
        serde_json::from_str(data).ok()
    }
}

/// Body of a TX envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TxEnvelopePayload {
    pub tx: TxPayload,
}

/// Body of a QUERY envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub what: String,
    #[serde(default)]
    pub params: Value,
}

/// Body of a RESPONSE envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub ok: bool,
    pub what: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryResponse {
    pub fn ok(what: &str, result: Value) -> Self {
        Self { ok: true, what: what.to_owned(), result: Some(result), error: None }
    }

    pub fn err(what: &str, error: impl Into<String>) -> Self {
        Self { ok: false, what: what.to_owned(), result: None, error: Some(error.into()) }
    }
}

/// Requests from a node to its driver.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeEvent {
    StartMining { job: u64, block: Block },
    CancelMining { job: u64 },
    Committed { ticket: Ticket, index: u64, hash: String },
    TxFailed { ticket: Ticket, error: String },
}

/// Instrumented steps of the commit pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowStep {
    Create,
    Mine,
    Verify,
    Store,
    Broadcast,
    Execute,
    Persist,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockOutcome {
    Appended,
    Ignored,
    SyncTriggered,
    Rejected(VerifyError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SyncOutcome {
    Adopted { reorg_depth: u64 },
    Unchanged,
    Rejected(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub mined: u64,
    pub appended_remote: u64,
    /// Blocks that failed verification, by reason.
    pub rejected: BTreeMap<String, u64>,
    pub bad_envelopes: u64,
    pub reorgs: u64,
    pub max_reorg_depth: u64,
    pub sync_requests: u64,
    pub retriable_failures: u64,
}

impl NodeStats {
    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }

    fn reject(&mut self, reason: VerifyError) {
        *self.rejected.entry(format!("{reason:?}")).or_default() += 1;
    }
}

struct MiningJob {
    id: u64,
    ticket: Ticket,
    data: String,
    attempt: u8,
}

struct PendingTx {
    ticket: Ticket,
    payload: TxPayload,
    data: String,
}

/// Where contract sources and state come from during execution.
trait ContractEnv {
    fn source(&self, id: &str) -> Option<Value>;
    fn state_of(&self, id: &str) -> BTreeMap<String, i64>;
}

impl ContractEnv for BlockStore {
    fn source(&self, id: &str) -> Option<Value> {
        self.contract_source(id)
    }

    fn state_of(&self, id: &str) -> BTreeMap<String, i64> {
        self.contract_state(id)
    }
}

/// In-memory state used to re-execute a whole chain from scratch.
#[derive(Default)]
struct Scratch {
    contracts: BTreeMap<String, Value>,
    state: BTreeMap<String, BTreeMap<String, i64>>,
}

impl ContractEnv for Scratch {
    fn source(&self, id: &str) -> Option<Value> {
        self.contracts.get(id).cloned()
    }

    fn state_of(&self, id: &str) -> BTreeMap<String, i64> {
        self.state.get(id).cloned().unwrap_or_default()
    }
}

impl Scratch {
    fn apply(&mut self, commit: &StateCommit) {
        for w in &commit.writes {
            self.state.entry(w.contract_id.clone()).or_default().insert(w.key.clone(), w.value);
        }
        for (id, source) in &commit.deploys {
            self.contracts.entry(id.clone()).or_insert_with(|| source.clone());
        }
    }
}

/// Executes the transaction carried by `block` against `env`, producing the
/// state commit for it. Non-transaction data executes nothing.
fn execute_block(cache: &ContractCache, interpreter: &Interpreter, env: &dyn ContractEnv, block: &Block) -> StateCommit {
    let mut commit = StateCommit::empty(block.index);
    let Some(payload) = TxPayload::from_block_data(&block.data) else { return commit };
    match payload {
        TxPayload::Raw { .. } => {}
        TxPayload::Deploy { contract } => match compile(&contract) {
            Ok(compiled) => {
                if env.source(&compiled.contract_id).is_none() {
                    commit.deploys.push((compiled.contract_id, contract));
                }
            }
            Err(e) => commit.outcome = Some(format!("{e:?}")),
        },
        TxPayload::Call { contract_id, args } => {
            match cache.cached_lookup(&contract_id, |id| env.source(id)) {
                Ok(compiled) => {
                    let mut state = env.state_of(&contract_id);
                    match interpreter.execute(&compiled, &args, &mut state) {
                        Ok(outcome) => {
                            commit.writes = outcome
                                .writes
                                .into_iter()
                                .map(|(key, value)| StateWrite { contract_id: contract_id.clone(), key, value })
                                .collect();
                        }
                        Err(e) => commit.outcome = Some(format!("{e:?}")),
                    }
                }
                Err(e) => commit.outcome = Some(e.to_string()),
            }
        }
    }
    commit
}

/// Re-executes every block of `chain` from empty state.
pub fn replay_commits(chain: &[Block], cache: &ContractCache, interpreter: &Interpreter) -> Vec<StateCommit> {
    let mut scratch = Scratch::default();
    chain
        .iter()
        .map(|block| {
            let commit = execute_block(cache, interpreter, &scratch, block);
            scratch.apply(&commit);
            commit
        })
        .collect()
}

/// Contract state produced by replaying `chain`, keyed by `(contract_id, key)`.
pub fn replay_state(chain: &[Block]) -> BTreeMap<(String, String), i64> {
    let cache = ContractCache::new();
    let mut scratch = Scratch::default();
    for block in chain {
        let commit = execute_block(&cache, &Interpreter::default(), &scratch, block);
        scratch.apply(&commit);
    }
    scratch
        .state
        .into_iter()
        .flat_map(|(id, kv)| kv.into_iter().map(move |(k, v)| ((id.clone(), k), v)))
        .collect()
}

pub struct Node {
    identity: NodeIdentity,
    params: ChainParams,
    store: BlockStore,
    difficulty: DifficultyState,
    gossip: Gossip,
    received: crate::net::SeenCache,
    cache: ContractCache,
    interpreter: Interpreter,
    stats: NodeStats,
    pending: VecDeque<PendingTx>,
    mining: Option<MiningJob>,
    next_job: u64,
    next_ticket: Ticket,
    events: Vec<NodeEvent>,
    flow_log: Option<Vec<(u64, FlowStep)>>,
}

impl Node {
    /// Wraps `store`, writing genesis into it if empty and re-executing any
    /// blocks whose state commit was lost.
    pub fn new(
        identity: NodeIdentity,
        listen_addr: impl Into<String>,
        params: ChainParams,
        store: BlockStore,
    ) -> Result<Self, NodeError> {
        params.validate()?;
        if store.get_block_count() == 0 {
            store.add_block(&genesis_block())?;
            store.commit_state(&StateCommit::empty(0))?;
        }
        if store.get_block(0)? != genesis_block() {
            return Err(NodeError::ForeignGenesis);
        }
        let chain = store.get_all_blocks();
        let node = Self {
            identity,
            difficulty: DifficultyState::replay(&params, &chain),
            params,
            store,
            gossip: Gossip::new(listen_addr),
            received: Default::default(),
            cache: ContractCache::new(),
            interpreter: Interpreter::default(),
            stats: NodeStats::default(),
            pending: VecDeque::new(),
            mining: None,
            next_job: 0,
            next_ticket: 0,
            events: Vec::new(),
            flow_log: None,
        };
        let resume_from = node.store.state_height().map_or(0, |h| h + 1);
        for block in node.store.blocks_from(resume_from) {
            let commit = execute_block(&node.cache, &node.interpreter, &node.store, &block);
            node.store.commit_state(&commit)?;
        }
        Ok(node)
    }

    pub fn identity(&self) -> &NodeIdentity {
        &self.identity
    }

    pub fn node_id(&self) -> &str {
        self.identity.node_id()
    }

    pub fn listen_addr(&self) -> &str {
        self.gossip.table.self_addr()
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn gossip(&self) -> &Gossip {
        &self.gossip
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn difficulty(&self) -> DifficultyState {
        self.difficulty
    }

    pub fn cache(&self) -> &ContractCache {
        &self.cache
    }

    pub fn tip(&self) -> Block {
        self.store.tip().expect("store always holds genesis")
    }

    pub fn is_mining(&self) -> bool {
        self.mining.is_some()
    }

    pub fn enable_flow_log(&mut self) {
        self.flow_log.get_or_insert_with(Vec::new);
    }

    pub fn flow_log(&self) -> &[(u64, FlowStep)] {
        self.flow_log.as_deref().unwrap_or(&[])
    }

    fn flow(&mut self, index: u64, step: FlowStep) {
        if let Some(log) = self.flow_log.as_mut() {
            log.push((index, step));
        }
    }

    pub fn drain_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn sign<T: Serialize>(&self, kind: MessageKind, payload: &T, now_ms: u64) -> Envelope {
        sign_payload(kind, now_ms, payload, &self.identity)
    }

    // -- peers ---------------------------------------------------------

    pub fn connect(&mut self, addr: &str, now_ms: u64, transport: &mut dyn Transport) {
        self.gossip.start_handshake(addr, &self.identity, now_ms, transport);
    }

    /// Sends `env` unchanged to every connected peer.
    pub fn send_to_peers(&mut self, env: &Envelope, transport: &mut dyn Transport) -> usize {
        self.gossip.send_to_connected(env, None, transport)
    }

    /// Periodic housekeeping: expires unanswered handshakes.
    pub fn tick(&mut self, now_ms: u64) {
        for addr in self.gossip.table.expire_handshakes(now_ms, HANDSHAKE_TIMEOUT_MS) {
            log::debug!("{}: handshake with {addr} timed out", self.listen_addr());
        }
    }

    // -- client transactions -------------------------------------------

    fn validate(&self, payload: &TxPayload) -> Result<(), TxError> {
        match payload {
            TxPayload::Raw { data } => {
                if data.as_bytes().contains(&FIELD_SEPARATOR) {
                    return Err(TxError::Separator);
                }
            }
            TxPayload::Deploy { contract } => {
                compile(contract).map_err(TxError::Compile)?;
            }
            TxPayload::Call { contract_id, .. } => {
                if !is_hash_hex(contract_id) {
                    return Err(TxError::UnknownContract(contract_id.clone()));
                }
                let deployed = self.store.contract_source(contract_id).is_some();
                let queued = self.pending.iter().any(|p| match &p.payload {
                    TxPayload::Deploy { contract } => contract_id_of(contract).as_deref() == Some(contract_id),
                    _ => false,
                });
                let in_flight = self.mining.as_ref().is_some_and(|job| {
                    matches!(TxPayload::from_block_data(&job.data),
                        Some(TxPayload::Deploy { contract }) if contract_id_of(&contract).as_deref() == Some(contract_id))
                });
                if !(deployed || queued || in_flight) {
                    return Err(TxError::UnknownContract(contract_id.clone()));
                }
            }
        }
        Ok(())
    }

    /// Queues a transaction for mining. The outcome arrives later as
    /// [`NodeEvent::Committed`] or [`NodeEvent::TxFailed`] for the ticket.
    pub fn submit_tx(&mut self, payload: TxPayload, now_ms: u64) -> Result<Ticket, TxError> {
        self.validate(&payload)?;
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        let data = payload.block_data();
        self.pending.push_back(PendingTx { ticket, payload, data });
        self.maybe_start_mining(now_ms);
        Ok(ticket)
    }

    fn start_job(&mut self, ticket: Ticket, data: String, attempt: u8, now_ms: u64) {
        let tip = self.tip();
        let block = match create_new_block(&data, &tip, self.difficulty.bits(), now_ms / 1000) {
            Ok(b) => b,
            Err(e) => {
                self.events.push(NodeEvent::TxFailed { ticket, error: e.to_string() });
                return;
            }
        };
        self.flow(block.index, FlowStep::Create);
        self.next_job += 1;
        let job = self.next_job;
        self.mining = Some(MiningJob { id: job, ticket, data, attempt });
        self.events.push(NodeEvent::StartMining { job, block });
    }

    fn maybe_start_mining(&mut self, now_ms: u64) {
        while self.mining.is_none() {
            let Some(next) = self.pending.pop_front() else { return };
            self.start_job(next.ticket, next.data, 0, now_ms);
        }
    }

    /// The tip moved under an active job: cancel it and retry once.
    fn restart_mining(&mut self, now_ms: u64) {
        let Some(job) = self.mining.take() else { return };
        self.events.push(NodeEvent::CancelMining { job: job.id });
        if job.attempt == 0 {
            self.start_job(job.ticket, job.data, 1, now_ms);
        } else {
            self.stats.retriable_failures += 1;
            self.events.push(NodeEvent::TxFailed {
                ticket: job.ticket,
                error: "retriable: lost the mining race twice to competing blocks".into(),
            });
            self.maybe_start_mining(now_ms);
        }
    }

    /// Result of a [`NodeEvent::StartMining`] job.
    pub fn on_mined(&mut self, job: u64, block: Block, now_ms: u64, transport: &mut dyn Transport) {
        if self.mining.as_ref().map(|j| j.id) != Some(job) {
            return;
        }
        self.flow(block.index, FlowStep::Mine);
        let tip = self.tip();
        match verify_block(&block, &tip, &self.params) {
            Ok(()) => {
                let ticket = self.mining.take().map(|j| j.ticket).expect("job checked above");
                match self.commit_block(&block, None, now_ms, transport) {
                    Ok(()) => {
                        self.stats.mined += 1;
                        self.events.push(NodeEvent::Committed {
                            ticket,
                            index: block.index,
                            hash: block.hash.clone(),
                        });
                    }
                    Err(e) => self.events.push(NodeEvent::TxFailed { ticket, error: e.to_string() }),
                }
                self.maybe_start_mining(now_ms);
            }
            Err(_) => self.restart_mining(now_ms),
        }
    }

    /// Convenience driver: submits and mines inline on this thread until the
    /// transaction commits. Consumes queued events.
    pub fn submit_tx_blocking(
        &mut self,
        payload: TxPayload,
        now_ms: u64,
        transport: &mut dyn Transport,
    ) -> Result<(u64, String), NodeError> {
        let ticket = self.submit_tx(payload, now_ms)?;
        let stop = AtomicBool::new(false);
        loop {
            let events = self.drain_events();
            if events.is_empty() {
                return Err(NodeError::Failed("no mining job was started".into()));
            }
            for event in events {
                match event {
                    NodeEvent::StartMining { job, block } => {
                        let mined = mine_block(block, &stop).map_err(|e| NodeError::Failed(e.to_string()))?;
                        self.on_mined(job, mined.block, now_ms, transport);
                    }
                    NodeEvent::Committed { ticket: t, index, hash } if t == ticket => return Ok((index, hash)),
                    NodeEvent::TxFailed { ticket: t, error } if t == ticket => return Err(NodeError::Failed(error)),
                    _ => {}
                }
            }
        }
    }

    /// Appends an already verified block and runs the rest of the pipeline.
    fn commit_block(
        &mut self,
        block: &Block,
        from: Option<&str>,
        now_ms: u64,
        transport: &mut dyn Transport,
    ) -> Result<(), NodeError> {
        self.flow(block.index, FlowStep::Verify);
        let prev = self.tip();
        self.store.add_block(block)?;
        self.flow(block.index, FlowStep::Store);
        if prev.index > 0 {
            self.difficulty = self.difficulty.observe(&self.params, prev.timestamp, block.timestamp);
        }
        self.received.insert(&block.hash);
        self.gossip.broadcast_block(block, from, &self.identity, now_ms, transport);
        self.flow(block.index, FlowStep::Broadcast);
        let commit = execute_block(&self.cache, &self.interpreter, &self.store, block);
        self.flow(block.index, FlowStep::Execute);
        self.store.commit_state(&commit)?;
        self.flow(block.index, FlowStep::Persist);
        Ok(())
    }

    // -- inbound messages ------------------------------------------------

    /// Decodes and dispatches one message body. Envelopes failing signature
    /// verification are counted and dropped here.
    pub fn on_message(&mut self, bytes: &[u8], now_ms: u64, transport: &mut dyn Transport) -> Option<Envelope> {
        match decode_envelope(bytes) {
            Ok(env) => self.on_envelope(env, now_ms, transport),
            Err(e) => {
                log::debug!("{}: dropping envelope: {e}", self.listen_addr());
                self.stats.bad_envelopes += 1;
                None
            }
        }
    }

    /// Dispatches a verified envelope. Returns a reply for the requesting
    /// connection when the message kind has one.
    pub fn on_envelope(&mut self, env: Envelope, now_ms: u64, transport: &mut dyn Transport) -> Option<Envelope> {
        self.gossip.table.touch(&env.sender, now_ms);
        match env.kind {
            MessageKind::Hello => {
                if let Err(e) = self.gossip.on_hello(&env, &self.identity, now_ms, transport) {
                    log::debug!("{}: bad HELLO: {e}", self.listen_addr());
                }
                None
            }
            MessageKind::Peers => {
                let _ = self.gossip.on_peers(&env, &self.identity, now_ms, transport);
                None
            }
            MessageKind::NewBlock => {
                self.handle_new_block(&env, now_ms, transport);
                None
            }
            MessageKind::GetBlocks => {
                self.serve_sync(&env, now_ms, transport);
                None
            }
            MessageKind::Blocks => {
                self.on_blocks(&env, now_ms, transport);
                None
            }
            MessageKind::Query => {
                let response = match env.payload_as::<QueryRequest>() {
                    Ok(req) => self.handle_query(&req),
                    Err(e) => QueryResponse::err("", e.to_string()),
                };
                Some(self.sign(MessageKind::Response, &response, now_ms))
            }
            MessageKind::Ping => Some(self.sign(MessageKind::Pong, &json!({}), now_ms)),
            // TX needs a deferred reply and is handled by the driver;
            // RESPONSE and PONG are client-side kinds.
            MessageKind::Tx | MessageKind::Response | MessageKind::Pong => None,
        }
    }

    pub fn handle_new_block(&mut self, env: &Envelope, now_ms: u64, transport: &mut dyn Transport) -> BlockOutcome {
        let Ok(NewBlockPayload { block }) = env.payload_as::<NewBlockPayload>() else {
            self.stats.reject(VerifyError::MalformedBlock);
            return BlockOutcome::Rejected(VerifyError::MalformedBlock);
        };
        if !self.received.insert(&block.hash) {
            return BlockOutcome::Ignored;
        }
        let tip = self.tip();
        let from = self.gossip.table.addr_for_node(&env.sender).map(str::to_owned);
        if block.index <= tip.index {
            return BlockOutcome::Ignored;
        }
        if block.index > tip.index + 1 {
            if let Some(addr) = &from {
                self.request_sync(addr, now_ms, transport);
            }
            return BlockOutcome::SyncTriggered;
        }
        match verify_block(&block, &tip, &self.params) {
            Ok(()) => {
                if let Err(e) = self.commit_block(&block, from.as_deref(), now_ms, transport) {
                    log::warn!("{}: failed to commit block {}: {e}", self.listen_addr(), block.index);
                    return BlockOutcome::Ignored;
                }
                self.stats.appended_remote += 1;
                self.restart_mining(now_ms);
                BlockOutcome::Appended
            }
            Err(reason) => {
                self.stats.reject(reason);
                // A well-formed successor on another parent may be the tip
                // of a heavier fork.
                if reason == VerifyError::PrevHashMismatch {
                    if let Some(addr) = &from {
                        self.request_sync(addr, now_ms, transport);
                        return BlockOutcome::SyncTriggered;
                    }
                }
                BlockOutcome::Rejected(reason)
            }
        }
    }

    /// Asks `peer` for its full chain.
    pub fn request_sync(&mut self, peer: &str, now_ms: u64, transport: &mut dyn Transport) {
        self.stats.sync_requests += 1;
        let env = self.sign(MessageKind::GetBlocks, &GetBlocksPayload { from_index: 0 }, now_ms);
        self.gossip.send(peer, &env, transport);
    }

    pub fn request_sync_all(&mut self, now_ms: u64, transport: &mut dyn Transport) {
        for addr in self.gossip.table.connected_addrs() {
            self.request_sync(&addr, now_ms, transport);
        }
    }

    /// Answers GET_BLOCKS with our chain from the requested index.
    pub fn serve_sync(&mut self, env: &Envelope, now_ms: u64, transport: &mut dyn Transport) {
        let from_index = env.payload_as::<GetBlocksPayload>().map(|p| p.from_index).unwrap_or(0);
        let Some(addr) = self.gossip.table.addr_for_node(&env.sender).map(str::to_owned) else {
            return;
        };
        let reply = self.blocks_envelope(from_index, now_ms);
        self.gossip.send(&addr, &reply, transport);
    }

    pub fn blocks_envelope(&self, from_index: u64, now_ms: u64) -> Envelope {
        let blocks = self.store.blocks_from(from_index);
        self.sign(MessageKind::Blocks, &BlocksPayload { blocks }, now_ms)
    }

    pub fn on_blocks(&mut self, env: &Envelope, now_ms: u64, _transport: &mut dyn Transport) -> SyncOutcome {
        let candidate = match env.payload_as::<BlocksPayload>() {
            Ok(p) => p.blocks,
            Err(e) => return SyncOutcome::Rejected(e.to_string()),
        };
        if candidate.first().map(|b| b.index) != Some(0) {
            return SyncOutcome::Unchanged;
        }
        let local = self.store.get_all_blocks();
        match choose_chain(&local, &candidate, &self.params) {
            Ok(ChainChoice::KeepLocal) => SyncOutcome::Unchanged,
            Ok(ChainChoice::AdoptCandidate) => match self.adopt_chain(&local, &candidate, now_ms) {
                Ok(depth) => SyncOutcome::Adopted { reorg_depth: depth },
                Err(e) => SyncOutcome::Rejected(e.to_string()),
            },
            Err(e) => {
                match e {
                    ChainChoiceError::Invalid { reason, .. } => self.stats.reject(reason),
                    ChainChoiceError::GenesisMismatch => self.stats.reject(VerifyError::MalformedBlock),
                }
                SyncOutcome::Rejected(e.to_string())
            }
        }
    }

    fn adopt_chain(&mut self, local: &[Block], candidate: &[Block], now_ms: u64) -> Result<u64, NodeError> {
        let common = local.iter().zip(candidate).take_while(|(a, b)| a.hash == b.hash).count();
        let depth = (local.len() - common) as u64;
        let (cache, interpreter) = (&self.cache, &self.interpreter);
        self.store.replace_chain(candidate, |blocks| replay_commits(blocks, cache, interpreter))?;
        self.difficulty = DifficultyState::replay(&self.params, candidate);
        for block in &candidate[common..] {
            self.received.insert(&block.hash);
        }
        if depth > 0 {
            self.stats.reorgs += 1;
            self.stats.max_reorg_depth = self.stats.max_reorg_depth.max(depth);
        }
        self.restart_mining(now_ms);
        Ok(depth)
    }

    // -- client reads ----------------------------------------------------

    pub fn handle_query(&self, req: &QueryRequest) -> QueryResponse {
        let what = req.what.as_str();
        match what {
            "chain" => QueryResponse::ok(what, json!(self.store.get_all_blocks())),
            "block" => {
                let Some(index) = req.params.get("index").and_then(Value::as_u64) else {
                    return QueryResponse::err(what, "missing integer param `index`");
                };
                match self.store.get_block(index) {
                    Ok(block) => QueryResponse::ok(what, json!(block)),
                    Err(_) => QueryResponse::err(what, "not-found"),
                }
            }
            "state" => {
                let id = req.params.get("contract_id").and_then(Value::as_str);
                let key = req.params.get("key").and_then(Value::as_str);
                let (Some(id), Some(key)) = (id, key) else {
                    return QueryResponse::err(what, "missing string params `contract_id` and `key`");
                };
                match self.store.get_state_entry(id, key) {
                    Some(entry) => QueryResponse::ok(what, json!({"value": entry.value, "version": entry.version})),
                    None => QueryResponse::err(what, "not-found"),
                }
            }
            "stats" => {
                let tip = self.tip();
                QueryResponse::ok(
                    what,
                    json!({
                        "count": self.store.get_block_count(),
                        "tip_hash": tip.hash,
                        "peer_count": self.gossip.table.connected_count(),
                        "difficulty": self.difficulty.bits(),
                        "difficulty_real": self.difficulty.d_current.to_string(),
                        "cache": self.cache.counters(),
                        "node_id": self.node_id(),
                    }),
                )
            }
            other => QueryResponse::err(other, format!("unknown query {other:?}")),
        }
    }
}

fn contract_id_of(source: &Value) -> Option<String> {
    contract_id(source).ok()
}
