//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::sync::atomic::AtomicBool;
use std::time::{Duration, Instant};

use meshledger::chain::{
    block_hash, check_linkage, genesis_block, Block, ChainParams, ZERO_HASH,
};
use meshledger::consensus::{
    adjust_difficulty, create_new_block, mine_block, raw_retarget, verify_block, DifficultyState,
};
use meshledger::contracts::{compile, contract_id, ContractCache, ExecError, Interpreter, MAX_DEPTH, STEP_LIMIT};
use meshledger::net::{Transport, TransportError};
use meshledger::node::{Node, TxPayload};
use meshledger::sim::{
    consistency_level, run_scenario, Behavior, ConsistencySample, ConsistencyReport, Link, Malicious,
    Partition, ScenarioConfig, Workload,
};
use meshledger::store::{BlockStore, CrashAfter, StateCommit};
use meshledger::wire::NodeIdentity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion(n: u32, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over time budget")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {n:>2}: {} {title} [{:.2}s / {}s] {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    ok
}

fn sim_params() -> ChainParams {
    ChainParams {
        target_block_interval: 2_000,
        initial_difficulty: 8,
        min_difficulty: 4,
        max_difficulty: 14,
        retarget_clamp: (0.5, 2.0),
    }
}

fn scenario(node_count: usize, duration_ms: u64) -> ScenarioConfig {
    ScenarioConfig {
        node_count,
        seed: 42,
        duration_ms,
        params: sim_params(),
        workload: Workload { write_interval_ms: 2_000, read_interval_ms: 1_000 },
        partitions: vec![],
        malicious: None,
        link: Link { latency_ms: 5, loss_rate: 0.0 },
        hashes_per_ms: 64,
        sync_interval_ms: None,
    }
}

// 1 -------------------------------------------------------------------------

fn retarget_exactness() -> Outcome {
    let raw = raw_retarget(8.0, 10_000, 20_000);
    ensure((raw - 4.0).abs() < 1e-12, || format!("raw retarget gave {raw}"))?;
    let params = ChainParams { min_difficulty: 0, max_difficulty: 32, ..ChainParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let d = rng.gen_range(0.0..=32.0);
        let target = rng.gen_range(1..=60_000u64);
        let actual = rng.gen_range(1..=120_000u64);
        let state = DifficultyState { d_current: d, t_target: target, t_actual_last: actual };
        let next = adjust_difficulty(state, &params).d_current;
        let ok = match actual.cmp(&target) {
            std::cmp::Ordering::Greater => next <= d,
            std::cmp::Ordering::Less => next >= d,
            std::cmp::Ordering::Equal => next == d,
        };
        ensure(ok && (0.0..=32.0).contains(&next), || format!("d={d} target={target} actual={actual} -> {next}"))?;
    }
    Ok("8 x 10000/20000 = 4; direction holds on 10000 samples".into())
}

// 2 -------------------------------------------------------------------------

/// Independent recount: the mode is the head with the highest count, ties
/// to the smallest hash; every other head is an inconsistent read.
fn recount(log: &[Vec<String>]) -> (u64, u64) {
    let mut bad = 0;
    let mut total = 0;
    for heads in log {
        total += heads.len() as u64;
        let mut sorted = heads.clone();
        sorted.sort();
        let mut best = (0usize, String::new());
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|h| **h == sorted[i]).count();
            if j > best.0 {
                best = (j, sorted[i].clone());
            }
            i += j;
        }
        bad += (heads.len() - best.0) as u64;
    }
    (bad, total)
}

fn consistency_exactness() -> Outcome {
    ensure(consistency_level(5, 1000) == Some(0.995), || format!("{:?}", consistency_level(5, 1000)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1_000 {
        let log: Vec<Vec<String>> = (0..rng.gen_range(1..40))
            .map(|_| (0..rng.gen_range(1..12)).map(|_| format!("{:02x}", rng.gen_range(0..5u8))).collect())
            .collect();
        let samples = log.iter().enumerate().map(|(t, h)| ConsistencySample::new(t as u64, h.clone())).collect();
        let report = ConsistencyReport::from_samples(samples);
        let (bad, total) = recount(&log);
        ensure(report.n_inconsistent == bad && report.n_total == total, || format!("{report:?} vs ({bad}, {total})"))?;
        ensure(report.c == Some(1.0 - bad as f64 / total as f64), || "c disagrees".into())?;
    }
    Ok("C(5, 1000) = 0.995; recount agrees on 1000 logs".into())
}

// 3 -------------------------------------------------------------------------

/// Reference verifier written against the block format directly.
fn reference_verdict(block: &Block, parent: &Block, min_difficulty: u32) -> Result<(), &'static str> {
    let hex64 = |s: &str| s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
    if block.difficulty > 32 || !hex64(&block.hash) || !hex64(&block.prev_hash) || block.data.contains('\u{1f}') {
        return Err("MalformedBlock");
    }
    if block.index != parent.index + 1 {
        return Err("WrongIndex");
    }
    if block.prev_hash != parent.hash {
        return Err("PrevHashMismatch");
    }
    let preimage = format!(
        "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
        block.index, block.timestamp, block.data, block.prev_hash, block.difficulty, block.nonce
    );
    let digest = Sha256::digest(preimage.as_bytes());
    if hex::encode(digest) != block.hash {
        return Err("HashMismatch");
    }
    let zeros = digest.iter().map(|b| b.leading_zeros()).scan(true, |go, z| {
        let out = if *go { Some(z) } else { None };
        *go = z == 8;
        out
    });
    if block.difficulty < min_difficulty || zeros.sum::<u32>() < block.difficulty {
        return Err("InsufficientWork");
    }
    Ok(())
}

fn flip_hex(s: &str) -> String {
    let mut out: Vec<u8> = s.bytes().collect();
    out[0] = if out[0] == b'0' { b'1' } else { b'0' };
    String::from_utf8(out).unwrap()
}

fn mined_chain(len: usize, difficulty: u32, tag: &str, from: Vec<Block>) -> Vec<Block> {
    let stop = AtomicBool::new(false);
    let mut chain = from;
    while chain.len() < len {
        let tip = chain.last().unwrap();
        let b = create_new_block(&format!("{tag}-{}", chain.len()), tip, difficulty, 1_700_000_000 + chain.len() as u64).unwrap();
        chain.push(mine_block(b, &stop).unwrap().block);
    }
    chain
}

fn mining_round_trip() -> Outcome {
    let params = ChainParams::default();
    let chain = mined_chain(101, 8, "acc", vec![genesis_block()]);
    let mut mutations = 0;
    for pair in chain.windows(2) {
        let (parent, block) = (&pair[0], &pair[1]);
        ensure(verify_block(block, parent, &params).is_ok(), || format!("block {} rejected", block.index))?;
        ensure(reference_verdict(block, parent, params.min_difficulty).is_ok(), || "reference disagrees".into())?;
        let single: Vec<Block> = vec![
            Block { index: block.index + 1, ..block.clone() },
            Block { index: block.index - 1, ..block.clone() },
            Block { timestamp: block.timestamp + 1, ..block.clone() },
            Block { data: format!("{}x", block.data), ..block.clone() },
            Block { data: format!("{}\u{1f}", block.data), ..block.clone() },
            Block { prev_hash: flip_hex(&block.prev_hash), ..block.clone() },
            Block { prev_hash: "z".repeat(64), ..block.clone() },
            Block { hash: flip_hex(&block.hash), ..block.clone() },
            Block { hash: block.hash.to_uppercase(), ..block.clone() },
            Block { difficulty: block.difficulty + 1, ..block.clone() },
            Block { difficulty: 33, ..block.clone() },
            Block { nonce: block.nonce + 1, ..block.clone() },
        ];
        for m in &single {
            let got = verify_block(m, parent, &params).map_err(|e| format!("{e:?}"));
            let want = reference_verdict(m, parent, params.min_difficulty).map_err(str::to_owned);
            ensure(want.is_err(), || format!("mutation of block {} not rejected by the reference", block.index))?;
            ensure(got == want, || format!("block {}: {got:?} but expected {want:?}", block.index))?;
            mutations += 1;
        }
        // Same edits with the hash recomputed: proof of work decides.
        let rehashed = [
            Block { timestamp: block.timestamp + 1, ..block.clone() },
            Block { nonce: block.nonce + 1, ..block.clone() },
            Block { difficulty: 0, ..block.clone() },
        ];
        for mut m in rehashed {
            m.hash = block_hash(&m);
            let got = verify_block(&m, parent, &params).map_err(|e| format!("{e:?}"));
            let want = reference_verdict(&m, parent, params.min_difficulty).map_err(str::to_owned);
            ensure(got == want, || format!("rehashed block {}: {got:?} vs {want:?}", block.index))?;
        }
    }
    Ok(format!("100 blocks verified; {mutations} single-field mutations rejected with the expected reason"))
}

// 4, 5, 6, 10 ---------------------------------------------------------------

fn gossip_convergence() -> Outcome {
    let r = run_scenario(&scenario(5, 60_000)).map_err(|e| e.to_string())?;
    ensure(r.consistency.c == Some(1.0), || format!("c = {:?}", r.consistency.c))?;
    ensure(r.heads_equal, || format!("heads differ: {:?}", r.final_heads))?;
    ensure(r.committed_tx_count > 0, || "nothing committed".into())?;
    Ok(format!("c = 1.0, {} tx, all 5 heads {}", r.committed_tx_count, &r.canonical_tip[..12]))
}

fn partition_heal() -> Outcome {
    let (start, end, settle) = (20_000, 40_000, 1_000);
    let mut cfg = scenario(5, 60_000);
    cfg.partitions = vec![Partition { start_ms: start, end_ms: end, groups: vec![vec![0, 1], vec![2, 3, 4]] }];
    let r = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let split = r.consistency.samples.iter().filter(|s| s.t > start && s.t < end);
    let max_distinct = split
        .map(|s| s.heads.iter().collect::<std::collections::BTreeSet<_>>().len())
        .max()
        .unwrap_or(0);
    ensure(max_distinct >= 2, || "no divergence during the partition".into())?;
    ensure(r.fork_count >= 1, || "no fork resolved".into())?;
    ensure(r.heads_equal, || format!("heads differ after heal: {:?}", r.final_heads))?;
    ensure(r.final_heads.iter().all(|h| *h == r.canonical_tip), || "heads not on the max-work chain".into())?;
    let c = r.consistency.c.unwrap_or(1.0);
    ensure(c < 1.0, || "c never dropped".into())?;
    let post = r.consistency.since(end + settle);
    ensure(post == Some(1.0), || format!("post-heal c = {post:?}"))?;
    Ok(format!(
        "{} forks, reorg depth {}, run c = {c:.4}, post-heal c = 1.0",
        r.fork_count, r.max_reorg_depth
    ))
}

fn adversarial() -> Outcome {
    let mut cfg = scenario(10, 120_000);
    cfg.malicious = Some(Malicious {
        fraction: 0.3,
        behaviors: vec![Behavior::InvalidPow, Behavior::BadPrevHash, Behavior::TamperedSignature],
        interval_ms: 3_000,
    });
    let r = run_scenario(&cfg).map_err(|e| e.to_string())?;
    ensure(r.malicious_nodes.len() == 3, || format!("{:?}", r.malicious_nodes))?;
    ensure(r.honest_chains_valid, || "an honest chain fails verification".into())?;
    ensure(r.malicious_blocks_in_honest_chains == 0, || "malicious block on an honest chain".into())?;
    ensure(r.rejected_invalid_blocks > 0, || "nothing rejected".into())?;
    ensure(r.rejected_bad_envelopes > 0, || "no tampered envelope dropped".into())?;
    for reason in ["InsufficientWork", "PrevHashMismatch"] {
        ensure(r.rejected_by_reason.contains_key(reason), || format!("no {reason} rejections: {:?}", r.rejected_by_reason))?;
    }
    let last = r.consistency.samples.last().ok_or("no samples")?;
    ensure(last.n_inconsistent == 0 && r.heads_equal, || "honest heads differ after the run".into())?;
    Ok(format!(
        "{} forged blocks emitted, rejected {:?}, {} bad envelopes dropped, run c = {:?}",
        r.malicious_blocks_emitted, r.rejected_by_reason, r.rejected_bad_envelopes, r.consistency.c
    ))
}

fn harness_determinism() -> Outcome {
    let mut cfg = scenario(6, 40_000);
    cfg.partitions = vec![Partition { start_ms: 10_000, end_ms: 20_000, groups: vec![vec![0, 1, 2], vec![3, 4, 5]] }];
    cfg.malicious = Some(Malicious { fraction: 0.34, behaviors: vec![Behavior::InvalidPow, Behavior::BadPrevHash], interval_ms: 2_500 });
    cfg.link.loss_rate = 0.02;
    cfg.sync_interval_ms = Some(5_000);
    let a = run_scenario(&cfg).map_err(|e| e.to_string())?.to_json_pretty();
    let b = run_scenario(&cfg).map_err(|e| e.to_string())?.to_json_pretty();
    ensure(a == b, || "reports differ".into())?;
    cfg.seed += 1;
    let c = run_scenario(&cfg).map_err(|e| e.to_string())?.to_json_pretty();
    ensure(a != c, || "seed has no effect".into())?;
    Ok(format!("two runs byte-identical ({} bytes)", a.len()))
}

// 7 -------------------------------------------------------------------------

const KEYS: [&str; 4] = ["a", "b", "c", "d"];

fn gen_expr(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    match rng.gen_range(0..if depth == 0 { 3 } else { 6 }) {
        0 => match rng.gen_range(0..6) {
            0 => json!(i64::MAX),
            1 => json!(i64::MIN),
            2 => json!(1i64 << 40),
            _ => json!(rng.gen_range(-100i64..100)),
        },
        1 => json!(["get", KEYS[rng.gen_range(0..4)]]),
        2 => json!(["arg", rng.gen_range(0..3)]),
        _ => {
            let op = ["add", "sub", "mul"][rng.gen_range(0..3)];
            json!([op, gen_expr(rng, depth - 1), gen_expr(rng, depth - 1)])
        }
    }
}

fn gen_stmts(rng: &mut ChaCha8Rng, depth: u32, max: usize) -> Value {
    let n = rng.gen_range(0..=max);
    Value::Array(
        (0..n)
            .map(|_| {
                if depth > 0 && rng.gen_bool(0.2) {
                    let cmp = ["eq", "lt"][rng.gen_range(0..2)];
                    json!(["if", [cmp, gen_expr(rng, 2), gen_expr(rng, 2)], gen_stmts(rng, depth - 1, 3), gen_stmts(rng, depth - 1, 3)])
                } else {
                    let op = ["set", "add", "sub"][rng.gen_range(0..3)];
                    json!([op, KEYS[rng.gen_range(0..4)], gen_expr(rng, 3)])
                }
            })
            .collect(),
    )
}

fn contract_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let first = Interpreter::default();
    let second = Interpreter { step_limit: STEP_LIMIT, max_depth: MAX_DEPTH };
    let (mut failures, mut injected) = (0, 0);
    for i in 0..1_000 {
        let mut source = gen_stmts(&mut rng, 2, 8);
        if source.as_array().unwrap().is_empty() {
            source = json!([["set", "a", 1]]);
        }
        let args: Vec<i64> = (0..3).map(|_| if rng.gen_bool(0.1) { i64::MAX } else { rng.gen_range(-50..50) }).collect();
        let mut initial = BTreeMap::new();
        for k in KEYS {
            if rng.gen_bool(0.5) {
                initial.insert(k.to_owned(), rng.gen_range(-1000..1000i64));
            }
        }

        let (ca, cb) = (compile(&source).map_err(|e| format!("#{i}: {e:?}"))?, compile(&source).unwrap());
        let (mut sa, mut sb) = (initial.clone(), initial.clone());
        let (ra, rb) = (first.execute(&ca, &args, &mut sa), second.execute(&cb, &args, &mut sb));
        ensure(ra == rb && sa == sb, || format!("#{i} diverged: {ra:?} vs {rb:?}"))?;
        if ra.is_err() {
            failures += 1;
            ensure(sa == initial, || format!("#{i} failed but wrote state"))?;
        }

        // Same program followed by a guaranteed overflow.
        let mut poisoned = source.as_array().unwrap().clone();
        poisoned.push(json!(["set", "z", ["mul", i64::MAX, 2]]));
        let cp = compile(&Value::Array(poisoned)).unwrap();
        let mut s = initial.clone();
        let r = first.execute(&cp, &args, &mut s);
        ensure(r.is_err() && s == initial, || format!("#{i} overflow injection left {s:?} ({r:?})"))?;
        if r == Err(ExecError::Overflow) {
            injected += 1;
        }

        // Step budget one short of what a successful run needed.
        if let Ok(outcome) = &ra {
            let tight = Interpreter { step_limit: outcome.steps - 1, max_depth: MAX_DEPTH };
            let mut s = initial.clone();
            let r = tight.execute(&ca, &args, &mut s);
            ensure(r == Err(ExecError::StepLimit) && s == initial, || format!("#{i} step-limit injection: {r:?}"))?;
            injected += 1;
        }
    }
    Ok(format!("1000 contracts agree ({failures} natural failures); {injected} injected failures left state untouched"))
}

// 8 -------------------------------------------------------------------------

/// One-second blocks at low difficulty, matching the timestamps used below.
fn small_params() -> ChainParams {
    ChainParams {
        target_block_interval: 1_000,
        initial_difficulty: 4,
        min_difficulty: 1,
        max_difficulty: 8,
        retarget_clamp: (0.5, 2.0),
    }
}

#[derive(Default)]
struct Discard;

impl Transport for Discard {
    fn send(&mut self, _: &str, _: &[u8]) -> Result<(), TransportError> {
        Ok(())
    }
}

fn cache_claim() -> Outcome {
    let n = 200u64;
    let source = json!([["add", "total", ["arg", 0]], ["if", ["lt", ["get", "max"], ["arg", 0]], [["set", "max", ["arg", 0]]], []]]);
    let id = contract_id(&source).unwrap();
    let cache = ContractCache::new();
    let interp = Interpreter::default();
    let (mut cached_state, mut fresh_state) = (BTreeMap::new(), BTreeMap::new());
    for k in 0..n {
        let args = [k as i64 * 7 % 13];
        let compiled = cache.cached_lookup(&id, |_| Some(source.clone())).map_err(|e| e.to_string())?;
        let a = interp.execute(&compiled, &args, &mut cached_state);
        let b = interp.execute(&compile(&source).unwrap(), &args, &mut fresh_state);
        ensure(a == b && cached_state == fresh_state, || format!("call {k}: cached {a:?} vs fresh {b:?}"))?;
    }
    let c = cache.counters();
    ensure(c.compiles == 1 && c.hits == n - 1 && c.misses == 1, || format!("{c:?}"))?;

    // The same through a node's commit pipeline.
    let params = small_params();
    let mut node = Node::new(NodeIdentity::from_seed([3; 32]), "n:0", params, BlockStore::in_memory()).unwrap();
    let calls = 20u64;
    node.submit_tx_blocking(TxPayload::Deploy { contract: source.clone() }, 0, &mut Discard).map_err(|e| e.to_string())?;
    for k in 0..calls {
        let tx = TxPayload::Call { contract_id: id.clone(), args: vec![k as i64] };
        node.submit_tx_blocking(tx, 1_000 * (k + 1), &mut Discard).map_err(|e| e.to_string())?;
    }
    let nc = node.cache().counters();
    ensure(nc.compiles == 1 && nc.hits == calls - 1, || format!("node cache {nc:?}"))?;
    ensure(node.store().get_state(&id, "total") == Some((0..calls as i64).sum()), || "node state wrong".into())?;
    Ok(format!("{n} calls: compiles 1, hits {}; node: {calls} calls, compiles 1, hits {}", c.hits, nc.hits))
}

// 9 -------------------------------------------------------------------------

fn open_node(path: &Path) -> Node {
    let params = small_params();
    Node::new(NodeIdentity::from_seed([9; 32]), "n:0", params, BlockStore::open(path).unwrap()).unwrap()
}

fn durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("node.db");
    let (tip, chain_bytes, file_bytes) = {
        let mut node = open_node(&path);
        for i in 0..20u64 {
            node.submit_tx_blocking(TxPayload::Raw { data: format!("d{i}") }, 1_000 * i, &mut Discard).map_err(|e| e.to_string())?;
        }
        let chain = serde_json::to_vec(&node.store().get_all_blocks()).unwrap();
        (node.tip().hash, chain, std::fs::read(&path).unwrap())
    };
    let node = open_node(&path);
    ensure(node.tip().hash == tip, || "tip changed across restart".into())?;
    ensure(serde_json::to_vec(&node.store().get_all_blocks()).unwrap() == chain_bytes, || "chain bytes differ".into())?;
    drop(node);
    ensure(std::fs::read(&path).unwrap() == file_bytes, || "reopening rewrote the file".into())?;

    // Crash injection: a base chain, one more block, and a heavier fork.
    let base = mined_chain(11, 4, "base", vec![genesis_block()]);
    let next = mined_chain(12, 4, "base", base.clone()).pop().unwrap();
    let fork = mined_chain(15, 4, "fork", base[..6].to_vec());
    let base_path = dir.path().join("base.db");
    {
        let store = BlockStore::open(&base_path).unwrap();
        for b in &base {
            store.add_block(b).unwrap();
            store.commit_state(&StateCommit::empty(b.index)).unwrap();
        }
    }
    let mut crashed = 0;
    for k in 0..100u64 {
        let path = dir.path().join(format!("crash-{k}.db"));
        std::fs::copy(&base_path, &path).unwrap();
        let offset = (k / 3) * 9;
        let op = k % 3;
        if op == 1 {
            BlockStore::open(&path).unwrap().add_block(&next).unwrap();
        }
        let store = BlockStore::open_with_crash(&path, CrashAfter(offset)).unwrap();
        let result = match op {
            0 => store.add_block(&next),
            1 => store.commit_state(&StateCommit::empty(next.index)),
            _ => store.replace_chain(&fork, |c| c.iter().map(|b| StateCommit::empty(b.index)).collect()),
        };
        crashed += u32::from(result.is_err());
        drop(store);

        let store = BlockStore::open(&path).map_err(|e| format!("point {k}: reopen failed: {e}"))?;
        let blocks = store.get_all_blocks();
        let count = store.get_block_count();
        let tip = store.tip().ok_or(format!("point {k}: empty store"))?;
        ensure(count == blocks.len() as u64 && tip.index == count - 1, || format!("point {k}: count/tip disagree"))?;
        ensure(store.get_latest_block_hash().ok() == Some(tip.hash.clone()), || format!("point {k}: latest hash"))?;
        ensure(check_linkage(&blocks).is_ok() && blocks[0].prev_hash == ZERO_HASH, || format!("point {k}: linkage"))?;
        let mut with_next = base.clone();
        with_next.push(next.clone());
        ensure(blocks == base || blocks == with_next || blocks == fork, || format!("point {k}: unexpected chain of {count}"))?;
        drop(store);
        let params = small_params();
        let node = Node::new(NodeIdentity::from_seed([1; 32]), "n:0", params, BlockStore::open(&path).unwrap())
            .map_err(|e| format!("point {k}: node recovery: {e}"))?;
        ensure(node.store().state_height() == Some(count - 1), || format!("point {k}: state not recovered"))?;
    }
    ensure(crashed > 50, || format!("only {crashed} injections interrupted a write"))?;
    Ok(format!("restart byte-identical; 100 injection points ({crashed} interrupted writes) recovered consistently"))
}

// 11 ------------------------------------------------------------------------

/// SHA-256 of the genesis preimage, computed with Python's hashlib before the
/// implementation existed.
const GENESIS_ORACLE: &str = "59f26e7ddc5e0efd36a420a4785746f5c0d9905185c2643db1df47774532c970";

fn genesis_oracle() -> Outcome {
    let g = genesis_block();
    ensure(g.hash == GENESIS_ORACLE, || format!("genesis hash {}", g.hash))?;
    let preimage = format!("0\u{1f}0\u{1f}GENESIS\u{1f}{}\u{1f}0\u{1f}0", "0".repeat(64));
    let external = Command::new("sha256sum")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .and_then(|mut child| {
            use std::io::Write;
            child.stdin.take().unwrap().write_all(preimage.as_bytes())?;
            child.wait_with_output()
        });
    match external {
        Ok(out) if out.status.success() => {
            let digest = String::from_utf8_lossy(&out.stdout).split_whitespace().next().unwrap_or_default().to_owned();
            ensure(digest == g.hash, || format!("sha256sum gave {digest}"))?;
            Ok(format!("{} matches the frozen oracle and sha256sum", &g.hash[..16]))
        }
        _ => Ok(format!("{} matches the frozen oracle (sha256sum unavailable)", &g.hash[..16])),
    }
}

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let results = [
        criterion(1, "retarget formula exact, direction property", s(1), retarget_exactness),
        criterion(2, "consistency level exact, recount oracle", s(1), consistency_exactness),
        criterion(3, "mining/verification round trip with mutations", s(30), mining_round_trip),
        criterion(4, "gossip convergence, 5 nodes, 60 s", s(10), gossip_convergence),
        criterion(5, "partition 2|3 then heal", s(15), partition_heal),
        criterion(6, "adversarial rejection, 30% of 10 nodes", s(30), adversarial),
        criterion(7, "contract determinism and atomicity", s(30), contract_determinism),
        criterion(8, "contract cache compiles once", s(30), cache_claim),
        criterion(9, "durability and crash injection", s(60), durability),
        criterion(10, "simulation reports reproducible", s(30), harness_determinism),
        criterion(11, "genesis hash oracle", s(1), genesis_oracle),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
