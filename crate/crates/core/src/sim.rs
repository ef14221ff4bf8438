//! Deterministic multi-node simulation.
//!
//! A scenario runs `node_count` in-process [`Node`]s over an in-memory
//! transport driven by a virtual clock. Everything that could vary between
//! runs (identities, message loss, which nodes misbehave) is drawn from a
//! ChaCha RNG seeded by the scenario seed, and events are ordered by
//! `(time, sequence)`, so a report is a pure function of the scenario.
//!
//! Mining performs the real nonce search; its virtual duration is the
//! number of hashes tried divided by `hashes_per_ms`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::atomic::AtomicBool;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::chain::{block_hash, cumulative_work, meets_difficulty, Block, ChainError, ChainParams};
use crate::consensus::{create_new_block, mine_block, verify_chain};
use crate::net::{PeerState, Transport, TransportError};
use crate::node::{Node, NodeEvent, Ticket, TxPayload};
use crate::store::BlockStore;
use crate::wire::{MessageKind, NewBlockPayload, NodeIdentity};

pub const MAX_NODES: usize = 64;
const TICK_INTERVAL_MS: u64 = 1_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("node_count must be between 1 and {MAX_NODES}, got {0}")]
    NodeCount(usize),
    #[error(transparent)]
    Params(#[from] ChainError),
    #[error("{0} must be positive")]
    ZeroInterval(&'static str),
    #[error("partition {0}: end_ms precedes start_ms")]
    PartitionWindow(usize),
    #[error("partitions {0} and {1} overlap in time")]
    PartitionOverlap(usize, usize),
    #[error("partition {0}: node {1} appears in more than one group")]
    PartitionGroupsOverlap(usize, usize),
    #[error("partition {0}: groups must cover exactly nodes 0..{1}")]
    PartitionCoverage(usize, usize),
    #[error("{0} must lie in [0, 1]")]
    Fraction(&'static str),
    #[error("malicious nodes configured without any behavior")]
    NoBehaviors,
    #[error("no honest nodes left to drive the workload")]
    NoHonestNodes,
    #[error("hashes_per_ms must be positive")]
    HashRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub write_interval_ms: u64,
    pub read_interval_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub start_ms: u64,
    pub end_ms: u64,
    pub groups: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Broadcast a block whose hash misses its declared difficulty.
    InvalidPow,
    /// Broadcast a properly mined block on a parent that does not exist.
    BadPrevHash,
    /// Broadcast a valid block in an envelope with a corrupted signature.
    TamperedSignature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Malicious {
    pub fraction: f64,
    /// Assigned to malicious nodes round-robin.
    pub behaviors: Vec<Behavior>,
    #[serde(default = "default_malicious_interval")]
    pub interval_ms: u64,
}

fn default_malicious_interval() -> u64 {
    3_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub latency_ms: u64,
    #[serde(default)]
    pub loss_rate: f64,
}

impl Default for Link {
    fn default() -> Self {
        Self { latency_ms: 5, loss_rate: 0.0 }
    }
}

fn default_hash_rate() -> u64 {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub node_count: usize,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub params: ChainParams,
    pub workload: Workload,
    #[serde(default)]
    pub partitions: Vec<Partition>,
    #[serde(default)]
    pub malicious: Option<Malicious>,
    #[serde(default)]
    pub link: Link,
    /// Simulated hashes per virtual millisecond for every node.
    #[serde(default = "default_hash_rate")]
    pub hashes_per_ms: u64,
    /// When set, honest nodes re-request their peers' chains this often.
    #[serde(default)]
    pub sync_interval_ms: Option<u64>,
}

impl ScenarioConfig {
    pub fn malicious_count(&self) -> usize {
        self.malicious.as_ref().map_or(0, |m| (m.fraction * self.node_count as f64).floor() as usize)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.node_count;
        if n == 0 || n > MAX_NODES {
            return Err(ScenarioError::NodeCount(n));
        }
        self.params.validate()?;
        if self.workload.write_interval_ms == 0 {
            return Err(ScenarioError::ZeroInterval("write_interval_ms"));
        }
        if self.workload.read_interval_ms == 0 {
            return Err(ScenarioError::ZeroInterval("read_interval_ms"));
        }
        if self.sync_interval_ms == Some(0) {
            return Err(ScenarioError::ZeroInterval("sync_interval_ms"));
        }
        if self.hashes_per_ms == 0 {
            return Err(ScenarioError::HashRate);
        }
        if !(0.0..=1.0).contains(&self.link.loss_rate) {
            return Err(ScenarioError::Fraction("loss_rate"));
        }
        for (i, p) in self.partitions.iter().enumerate() {
            if p.end_ms < p.start_ms {
                return Err(ScenarioError::PartitionWindow(i));
            }
            let mut seen = BTreeSet::new();
            for &node in p.groups.iter().flatten() {
                if !seen.insert(node) {
                    return Err(ScenarioError::PartitionGroupsOverlap(i, node));
                }
            }
            if seen != (0..n).collect() {
                return Err(ScenarioError::PartitionCoverage(i, n));
            }
            for (j, q) in self.partitions.iter().enumerate().skip(i + 1) {
                let empty = p.start_ms == p.end_ms || q.start_ms == q.end_ms;
                if !empty && p.start_ms < q.end_ms && q.start_ms < p.end_ms {
                    return Err(ScenarioError::PartitionOverlap(i, j));
                }
            }
        }
        if let Some(m) = &self.malicious {
            if !(0.0..=1.0).contains(&m.fraction) {
                return Err(ScenarioError::Fraction("malicious.fraction"));
            }
            if m.interval_ms == 0 {
                return Err(ScenarioError::ZeroInterval("malicious.interval_ms"));
            }
            if self.malicious_count() > 0 && m.behaviors.is_empty() {
                return Err(ScenarioError::NoBehaviors);
            }
        }
        if self.malicious_count() >= n {
            return Err(ScenarioError::NoHonestNodes);
        }
        Ok(())
    }
}

/// `1 - n_inconsistent / n_total`, or `None` when nothing was read.
pub fn consistency_level(n_inconsistent: u64, n_total: u64) -> Option<f64> {
    if n_total == 0 {
        return None;
    }
    Some(1.0 - n_inconsistent as f64 / n_total as f64)
}

/// Most frequent head; ties go to the lexicographically smallest hash.
pub fn mode_hash<'a>(heads: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for h in heads {
        *counts.entry(h).or_default() += 1;
    }
    // BTreeMap iterates in ascending key order and max_by_key keeps the
    // last maximum, so reverse to prefer the smallest key.
    counts.into_iter().rev().max_by_key(|(_, c)| *c).map(|(h, _)| h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySample {
    pub t: u64,
    /// Head hash of each honest node, in node order.
    pub heads: Vec<String>,
    pub mode_hash: String,
    pub n_inconsistent: u64,
}

impl ConsistencySample {
    pub fn new(t: u64, heads: Vec<String>) -> Self {
        let mode = mode_hash(heads.iter().map(String::as_str)).unwrap_or_default().to_owned();
        let n_inconsistent = heads.iter().filter(|h| **h != mode).count() as u64;
        Self { t, heads, mode_hash: mode, n_inconsistent }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub samples: Vec<ConsistencySample>,
    pub n_total: u64,
    pub n_inconsistent: u64,
    pub c: Option<f64>,
}

impl ConsistencyReport {
    pub fn from_samples(samples: Vec<ConsistencySample>) -> Self {
        let n_total = samples.iter().map(|s| s.heads.len() as u64).sum();
        let n_inconsistent = samples.iter().map(|s| s.n_inconsistent).sum();
        Self { c: consistency_level(n_inconsistent, n_total), samples, n_total, n_inconsistent }
    }

    /// Consistency over samples taken at or after `t`.
    pub fn since(&self, t: u64) -> Option<f64> {
        let tail: Vec<_> = self.samples.iter().filter(|s| s.t >= t).collect();
        consistency_level(
            tail.iter().map(|s| s.n_inconsistent).sum(),
            tail.iter().map(|s| s.heads.len() as u64).sum(),
        )
    }

    /// Samples as CSV with header `t_ms,mode_hash,n_inconsistent,n_nodes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,mode_hash,n_inconsistent,n_nodes\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{},{}\n", s.t, s.mode_hash, s.n_inconsistent, s.heads.len()));
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WriteLatency {
    pub p50: u64,
    pub p95: u64,
    pub max: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadLatency {
    pub p50: u64,
    pub p95: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub node_count: usize,
    pub malicious_nodes: Vec<usize>,
    pub duration_ms: u64,
    /// Virtual time at which the network went quiet after the workload.
    pub quiescent_at_ms: u64,
    pub committed_tx_count: u64,
    pub failed_tx_count: u64,
    /// Committed transactions per virtual second of workload.
    pub throughput: f64,
    /// Submit until a majority of honest nodes hold the block on their chain.
    pub write_latency: WriteLatency,
    /// Query sent until response received.
    pub read_latency: ReadLatency,
    pub consistency: ConsistencyReport,
    /// Chain reorganizations across honest nodes.
    pub fork_count: u64,
    pub max_reorg_depth: u64,
    pub rejected_invalid_blocks: u64,
    /// Honest rejections by verification failure.
    pub rejected_by_reason: BTreeMap<String, u64>,
    pub rejected_bad_envelopes: u64,
    pub malicious_blocks_emitted: u64,
    pub malicious_blocks_in_honest_chains: u64,
    pub honest_chains_valid: bool,
    pub heads_equal: bool,
    pub canonical_tip: String,
    pub canonical_length: u64,
    pub canonical_work: u128,
    pub final_heads: Vec<String>,
}

impl MetricsReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[u64], p: u64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p as usize * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

fn addr(i: usize) -> String {
    format!("sim-{i}")
}

enum Action {
    Deliver { to: usize, from: usize, bytes: Vec<u8> },
    MiningDone { node: usize, job: u64, block: Block },
    Write,
    Read,
    PartitionStart(usize),
    PartitionEnd,
    Adversary(usize),
    Resync,
    Tick,
}

struct Scheduled {
    at: u64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Collects a node's outgoing messages for the simulator to schedule.
#[derive(Default)]
struct Outbox(Vec<(String, Vec<u8>)>);

impl Transport for Outbox {
    fn send(&mut self, to: &str, message: &[u8]) -> Result<(), TransportError> {
        self.0.push((to.to_owned(), message.to_vec()));
        Ok(())
    }
}

struct WriteRecord {
    submitted_at: u64,
    hash: Option<String>,
}

struct Sim {
    cfg: ScenarioConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    honest: Vec<usize>,
    behavior: BTreeMap<usize, Behavior>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    now: u64,
    /// Group id of each node while a partition is active.
    groups: Option<Vec<usize>>,
    next_writer: usize,
    write_seq: u64,
    writes: BTreeMap<(usize, Ticket), WriteRecord>,
    failed_writes: u64,
    /// Per block hash, the times honest nodes first held it on their chain.
    held_at: BTreeMap<String, Vec<u64>>,
    held: Vec<BTreeSet<String>>,
    tips: Vec<String>,
    samples: Vec<ConsistencySample>,
    read_latencies: Vec<u64>,
    emitted: BTreeSet<String>,
}

impl Sim {
    fn new(cfg: ScenarioConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nodes: Vec<Node> = (0..cfg.node_count)
            .map(|i| {
                let identity = NodeIdentity::from_seed(rng.gen());
                Node::new(identity, addr(i), cfg.params.clone(), BlockStore::in_memory())
                    .expect("validated params and a fresh store")
            })
            .collect();
        let mut order: Vec<usize> = (0..cfg.node_count).collect();
        order.shuffle(&mut rng);
        let mut bad: Vec<usize> = order[..cfg.malicious_count()].to_vec();
        bad.sort_unstable();
        let behavior = match &cfg.malicious {
            Some(m) => bad.iter().enumerate().map(|(k, &i)| (i, m.behaviors[k % m.behaviors.len()])).collect(),
            None => BTreeMap::new(),
        };
        let honest = (0..cfg.node_count).filter(|i| !behavior.contains_key(i)).collect();
        let tips = nodes.iter().map(|n| n.tip().hash).collect();
        let held = nodes.iter().map(|n| BTreeSet::from([n.tip().hash])).collect();
        Self {
            rng,
            nodes,
            honest,
            behavior,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            groups: None,
            next_writer: 0,
            write_seq: 0,
            writes: BTreeMap::new(),
            failed_writes: 0,
            held_at: BTreeMap::new(),
            held,
            tips,
            samples: Vec::new(),
            read_latencies: Vec::new(),
            emitted: BTreeSet::new(),
            cfg,
        }
    }

    fn schedule(&mut self, at: u64, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, action }));
    }

    fn reachable(&self, a: usize, b: usize) -> bool {
        self.groups.as_ref().is_none_or(|g| g[a] == g[b])
    }

    fn is_honest(&self, i: usize) -> bool {
        !self.behavior.contains_key(&i)
    }

    /// Schedules a node's outgoing messages and acts on its queued events.
    fn flush(&mut self, from: usize, outbox: Outbox) {
        for (to_addr, bytes) in outbox.0 {
            let Some(to) = to_addr.strip_prefix("sim-").and_then(|s| s.parse::<usize>().ok()) else { continue };
            if to >= self.nodes.len() || !self.reachable(from, to) {
                continue;
            }
            if self.cfg.link.loss_rate > 0.0 && self.rng.gen_bool(self.cfg.link.loss_rate) {
                continue;
            }
            self.schedule(self.now + self.cfg.link.latency_ms, Action::Deliver { to, from, bytes });
        }
        for event in self.nodes[from].drain_events() {
            match event {
                NodeEvent::StartMining { job, block } => {
                    let mined = mine_block(block, &AtomicBool::new(false)).expect("difficulty at most 32 is satisfiable");
                    let took = mined.attempts.div_ceil(self.cfg.hashes_per_ms).max(1);
                    self.schedule(self.now + took, Action::MiningDone { node: from, job, block: mined.block });
                }
                NodeEvent::CancelMining { .. } => {}
                NodeEvent::Committed { ticket, hash, .. } => {
                    if let Some(w) = self.writes.get_mut(&(from, ticket)) {
                        w.hash = Some(hash);
                    }
                }
                NodeEvent::TxFailed { .. } => self.failed_writes += 1,
            }
        }
        self.track_tip(from);
    }

    /// Records when an honest node first holds each block of a new tip.
    fn track_tip(&mut self, i: usize) {
        let tip = self.nodes[i].tip();
        if tip.hash == self.tips[i] {
            return;
        }
        self.tips[i] = tip.hash.clone();
        if !self.is_honest(i) {
            return;
        }
        for index in (0..=tip.index).rev() {
            let Ok(block) = self.nodes[i].store().get_block(index) else { break };
            if !self.held[i].insert(block.hash.clone()) {
                break;
            }
            self.held_at.entry(block.hash).or_default().push(self.now);
        }
    }

    fn run(mut self) -> MetricsReport {
        let cfg = self.cfg.clone();
        for i in 1..self.nodes.len() {
            let mut out = Outbox::default();
            self.nodes[i].connect(&addr(0), 0, &mut out);
            self.flush(i, out);
        }
        let mut t = cfg.workload.write_interval_ms;
        while t < cfg.duration_ms {
            self.schedule(t, Action::Write);
            t += cfg.workload.write_interval_ms;
        }
        let mut t = cfg.workload.read_interval_ms;
        while t <= cfg.duration_ms {
            self.schedule(t, Action::Read);
            t += cfg.workload.read_interval_ms;
        }
        let mut t = TICK_INTERVAL_MS;
        while t < cfg.duration_ms {
            self.schedule(t, Action::Tick);
            t += TICK_INTERVAL_MS;
        }
        if let Some(every) = cfg.sync_interval_ms {
            let mut t = every;
            while t < cfg.duration_ms {
                self.schedule(t, Action::Resync);
                t += every;
            }
        }
        for (k, p) in cfg.partitions.iter().enumerate() {
            if p.start_ms < p.end_ms {
                self.schedule(p.start_ms, Action::PartitionStart(k));
                self.schedule(p.end_ms, Action::PartitionEnd);
            }
        }
        if let Some(m) = &cfg.malicious {
            let bad: Vec<usize> = self.behavior.keys().copied().collect();
            for (k, &i) in bad.iter().enumerate() {
                let mut t = m.interval_ms + (k as u64 * m.interval_ms) / bad.len() as u64;
                while t < cfg.duration_ms {
                    self.schedule(t, Action::Adversary(i));
                    t += m.interval_ms;
                }
            }
        }

        while let Some(Reverse(ev)) = self.queue.pop() {
            self.now = ev.at;
            self.step(ev.action);
        }
        let quiescent_at = self.now.max(cfg.duration_ms);
        self.now = quiescent_at;
        self.sample();
        self.report(quiescent_at)
    }

    fn step(&mut self, action: Action) {
        let now = self.now;
        match action {
            Action::Deliver { to, from, bytes } => {
                if !self.reachable(from, to) {
                    return;
                }
                let mut out = Outbox::default();
                self.nodes[to].on_message(&bytes, now, &mut out);
                self.flush(to, out);
            }
            Action::MiningDone { node, job, block } => {
                let mut out = Outbox::default();
                self.nodes[node].on_mined(job, block, now, &mut out);
                self.flush(node, out);
            }
            Action::Write => {
                let node = self.honest[self.next_writer % self.honest.len()];
                self.next_writer += 1;
                self.write_seq += 1;
                let payload = TxPayload::Raw { data: format!("w{}", self.write_seq) };
                match self.nodes[node].submit_tx(payload, now) {
                    Ok(ticket) => {
                        self.writes.insert((node, ticket), WriteRecord { submitted_at: now, hash: None });
                    }
                    Err(_) => self.failed_writes += 1,
                }
                self.flush(node, Outbox::default());
            }
            Action::Read => self.sample(),
            Action::PartitionStart(k) => {
                let mut g = vec![0; self.nodes.len()];
                for (gid, members) in self.cfg.partitions[k].groups.iter().enumerate() {
                    for &m in members {
                        g[m] = gid;
                    }
                }
                self.groups = Some(g);
            }
            Action::PartitionEnd => {
                self.groups = None;
                for i in 0..self.nodes.len() {
                    let mut out = Outbox::default();
                    let stale: Vec<String> = self.nodes[i]
                        .gossip()
                        .table
                        .records()
                        .filter(|r| r.state != PeerState::Connected)
                        .map(|r| r.addr.clone())
                        .collect();
                    for a in stale {
                        self.nodes[i].connect(&a, now, &mut out);
                    }
                    self.nodes[i].request_sync_all(now, &mut out);
                    self.flush(i, out);
                }
            }
            Action::Resync => {
                for i in self.honest.clone() {
                    let mut out = Outbox::default();
                    self.nodes[i].request_sync_all(now, &mut out);
                    self.flush(i, out);
                }
            }
            Action::Tick => {
                for n in &mut self.nodes {
                    n.tick(now);
                }
            }
            Action::Adversary(i) => {
                let mut out = Outbox::default();
                self.malicious_step(i, &mut out);
                self.flush(i, out);
            }
        }
    }

    fn sample(&mut self) {
        let heads: Vec<String> = self.honest.iter().map(|&i| self.nodes[i].tip().hash).collect();
        for _ in &heads {
            self.read_latencies.push(2 * self.cfg.link.latency_ms);
        }
        self.samples.push(ConsistencySample::new(self.now, heads));
    }

    fn malicious_step(&mut self, i: usize, out: &mut Outbox) {
        let block = malicious_block(&self.nodes[i], self.behavior[&i], &mut self.rng, self.now);
        self.emitted.insert(block.hash.clone());
        let mut env = self.nodes[i].sign(MessageKind::NewBlock, &NewBlockPayload { block }, self.now);
        if self.behavior[&i] == Behavior::TamperedSignature {
            let flipped = if env.signature.starts_with('0') { '1' } else { '0' };
            env.signature.replace_range(0..1, &flipped.to_string());
        }
        self.nodes[i].send_to_peers(&env, out);
    }

    fn report(self, quiescent_at: u64) -> MetricsReport {
        let honest_chains: Vec<Vec<Block>> =
            self.honest.iter().map(|&i| self.nodes[i].store().get_all_blocks()).collect();
        let (canonical, canonical_work) = honest_chains
            .iter()
            .map(|c| (c, cumulative_work(c).unwrap_or(0)))
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.last().map(|x| &x.hash).cmp(&a.0.last().map(|x| &x.hash))))
            .expect("at least one honest node");
        let canonical_hashes: BTreeSet<&str> = canonical.iter().map(|b| b.hash.as_str()).collect();
        let final_heads: Vec<String> = honest_chains.iter().map(|c| c.last().unwrap().hash.clone()).collect();

        let majority = self.honest.len() / 2 + 1;
        let mut write_lat: Vec<u64> = self
            .writes
            .values()
            .filter_map(|w| {
                let hash = w.hash.as_deref()?;
                if !canonical_hashes.contains(hash) {
                    return None;
                }
                let times = self.held_at.get(hash)?;
                let at = *times.get(majority - 1)?;
                Some(at.saturating_sub(w.submitted_at))
            })
            .collect();
        write_lat.sort_unstable();
        let mut read_lat = self.read_latencies.clone();
        read_lat.sort_unstable();

        let stats: Vec<_> = self.honest.iter().map(|&i| self.nodes[i].stats()).collect();
        let committed = canonical.len() as u64 - 1;
        let mut by_reason = BTreeMap::new();
        for (reason, n) in stats.iter().flat_map(|s| &s.rejected) {
            *by_reason.entry(reason.clone()).or_insert(0) += n;
        }
        let in_honest = honest_chains
            .iter()
            .flatten()
            .filter(|b| self.emitted.contains(&b.hash))
            .map(|b| b.hash.as_str())
            .collect::<BTreeSet<_>>()
            .len() as u64;
        MetricsReport {
            seed: self.cfg.seed,
            node_count: self.cfg.node_count,
            malicious_nodes: self.behavior.keys().copied().collect(),
            duration_ms: self.cfg.duration_ms,
            quiescent_at_ms: quiescent_at,
            committed_tx_count: committed,
            failed_tx_count: self.failed_writes,
            throughput: committed as f64 * 1000.0 / self.cfg.duration_ms.max(1) as f64,
            write_latency: WriteLatency {
                p50: percentile(&write_lat, 50),
                p95: percentile(&write_lat, 95),
                max: write_lat.last().copied().unwrap_or(0),
            },
            read_latency: ReadLatency { p50: percentile(&read_lat, 50), p95: percentile(&read_lat, 95) },
            consistency: ConsistencyReport::from_samples(self.samples),
            fork_count: stats.iter().map(|s| s.reorgs).sum(),
            max_reorg_depth: stats.iter().map(|s| s.max_reorg_depth).max().unwrap_or(0),
            rejected_invalid_blocks: stats.iter().map(|s| s.rejected_total()).sum(),
            rejected_by_reason: by_reason,
            rejected_bad_envelopes: stats.iter().map(|s| s.bad_envelopes).sum(),
            malicious_blocks_emitted: self.emitted.len() as u64,
            malicious_blocks_in_honest_chains: in_honest,
            honest_chains_valid: honest_chains.iter().all(|c| verify_chain(c, &self.cfg.params).is_ok()),
            heads_equal: final_heads.iter().all(|h| *h == final_heads[0]),
            canonical_tip: canonical.last().unwrap().hash.clone(),
            canonical_length: canonical.len() as u64,
            canonical_work,
            final_heads,
        }
    }
}

/// Builds the block an adversary running `behavior` emits on top of `node`'s
/// current chain.
pub fn malicious_block(node: &Node, behavior: Behavior, rng: &mut impl Rng, now_ms: u64) -> Block {
    let tip = node.tip();
    let bits = node.difficulty().bits().max(node.params().min_difficulty).max(1);
    let data = json!({"kind": "raw", "data": format!("forged-{}", rng.gen::<u32>())}).to_string();
    let mut block = create_new_block(&data, &tip, bits, now_ms / 1000).expect("no separator in forged data");
    let stop = AtomicBool::new(false);
    match behavior {
        Behavior::InvalidPow => {
            block.hash = block_hash(&block);
            while meets_difficulty(&block.hash, bits).unwrap_or(false) {
                block.nonce += 1;
                block.hash = block_hash(&block);
            }
            block
        }
        Behavior::BadPrevHash => {
            block.prev_hash = hex::encode(rng.gen::<[u8; 32]>());
            mine_block(block, &stop).expect("satisfiable").block
        }
        Behavior::TamperedSignature => mine_block(block, &stop).expect("satisfiable").block,
    }
}

/// Runs a scenario to quiescence and reports its metrics.
pub fn run_scenario(config: &ScenarioConfig) -> Result<MetricsReport, ScenarioError> {
    config.validate()?;
    Ok(Sim::new(config.clone()).run())
}
