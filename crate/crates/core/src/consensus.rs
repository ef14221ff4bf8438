//! Block creation, mining, verification, difficulty retargeting and fork
//! choice.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    block_hash, check_linkage, cumulative_work, genesis_block, is_hash_hex, meets_difficulty,
    Block, ChainParams, FIELD_SEPARATOR, MAX_DIFFICULTY_BITS,
};

/// How many nonces are tried between checks of the stop signal.
pub const CANCEL_CHECK_INTERVAL: u64 = 1 << 12;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerifyError {
    #[error("block index is not one past the current head")]
    WrongIndex,
    #[error("previous hash does not match the current head")]
    PrevHashMismatch,
    #[error("block hash does not match its contents")]
    HashMismatch,
    #[error("block hash does not meet its proof-of-work target")]
    InsufficientWork,
    #[error("block is malformed")]
    MalformedBlock,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CreateError {
    #[error("block data contains the 0x1F field separator")]
    SeparatorInData,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MineError {
    #[error("mining cancelled")]
    Cancelled,
    #[error("nonce space exhausted")]
    Exhausted,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainChoiceError {
    #[error("candidate does not share our genesis block")]
    GenesisMismatch,
    #[error("candidate block {index} rejected: {reason}")]
    Invalid { index: u64, reason: VerifyError },
}

/// Mining outcome together with how many hashes it took.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mined {
    pub block: Block,
    pub attempts: u64,
}

/// Retarget state. `d_current` is kept real-valued; only its rounding is used
/// as a proof-of-work target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyState {
    pub d_current: f64,
    /// Target time between blocks, milliseconds.
    pub t_target: u64,
    /// Time between the two most recent block timestamps, milliseconds.
    pub t_actual_last: u64,
}

impl DifficultyState {
    pub fn new(params: &ChainParams) -> Self {
        Self {
            d_current: f64::from(params.initial_difficulty),
            t_target: params.target_block_interval,
            t_actual_last: params.target_block_interval,
        }
    }

    /// Integer bits used for mining: round to nearest, ties up.
    pub fn bits(&self) -> u32 {
        (self.d_current + 0.5).floor().clamp(0.0, f64::from(MAX_DIFFICULTY_BITS)) as u32
    }

    /// Folds [`adjust_difficulty`] over every block-to-block interval of a
    /// chain. The genesis timestamp is a placeholder, so the interval
    /// genesis → block 1 is not a sample.
    pub fn replay(params: &ChainParams, chain: &[Block]) -> Self {
        let mut state = Self::new(params);
        for pair in chain.windows(2).skip(1) {
            state = state.observe(params, pair[0].timestamp, pair[1].timestamp);
        }
        state
    }

    /// Retargets after a block stamped `next_ts` followed one stamped `prev_ts`.
    pub fn observe(self, params: &ChainParams, prev_ts: u64, next_ts: u64) -> Self {
        let elapsed_ms = next_ts.saturating_sub(prev_ts).saturating_mul(1000);
        adjust_difficulty(
            DifficultyState { t_actual_last: elapsed_ms, ..self },
            params,
        )
    }
}

/// Unclamped `d_current * t_target / t_actual`.
pub fn raw_retarget(d_current: f64, t_target_ms: u64, t_actual_ms: u64) -> f64 {
    d_current * (t_target_ms as f64 / t_actual_ms.max(1) as f64)
}

/// One retarget step: factor clamped to `retarget_clamp`, result clamped to
/// `[min_difficulty, max_difficulty]`.
pub fn adjust_difficulty(state: DifficultyState, params: &ChainParams) -> DifficultyState {
    let (lo, hi) = params.retarget_clamp;
    let t_actual = state.t_actual_last.max(1);
    let factor = (state.t_target as f64 / t_actual as f64).clamp(lo, hi);
    let d_new = (state.d_current * factor).clamp(
        f64::from(params.min_difficulty),
        f64::from(params.max_difficulty),
    );
    DifficultyState {
        d_current: d_new,
        t_target: state.t_target,
        t_actual_last: t_actual,
    }
}

/// Unmined successor of `head`.
pub fn create_new_block(
    data: &str,
    head: &Block,
    difficulty: u32,
    timestamp: u64,
) -> Result<Block, CreateError> {
    if data.as_bytes().contains(&FIELD_SEPARATOR) {
        return Err(CreateError::SeparatorInData);
    }
    Ok(Block {
        index: head.index + 1,
        timestamp,
        data: data.to_owned(),
        prev_hash: head.hash.clone(),
        hash: String::new(),
        difficulty,
        nonce: 0,
    })
}

/// Scans nonces upward from `block.nonce` until the hash meets the block's
/// difficulty.
pub fn mine_block(block: Block, cancel: &AtomicBool) -> Result<Mined, MineError> {
    let mut candidate = block;
    let start = candidate.nonce;
    let target = candidate.difficulty.min(MAX_DIFFICULTY_BITS);
    loop {
        if (candidate.nonce - start).is_multiple_of(CANCEL_CHECK_INTERVAL) && cancel.load(Ordering::Relaxed) {
            return Err(MineError::Cancelled);
        }
        let hash = block_hash(&candidate);
        // block_hash always yields 64 hex chars and target <= 32.
        if meets_difficulty(&hash, target).unwrap_or(false) {
            candidate.hash = hash;
            let attempts = candidate.nonce - start + 1;
            return Ok(Mined { block: candidate, attempts });
        }
        candidate.nonce = candidate.nonce.checked_add(1).ok_or(MineError::Exhausted)?;
    }
}

fn is_well_formed(block: &Block) -> bool {
    block.difficulty <= MAX_DIFFICULTY_BITS
        && is_hash_hex(&block.hash)
        && is_hash_hex(&block.prev_hash)
        && !block.data.as_bytes().contains(&FIELD_SEPARATOR)
}

/// Checks `block` as the successor of `current_head`: index, parent hash,
/// own hash, then proof of work.
pub fn verify_block(
    block: &Block,
    current_head: &Block,
    params: &ChainParams,
) -> Result<(), VerifyError> {
    if !is_well_formed(block) {
        return Err(VerifyError::MalformedBlock);
    }
    if current_head.index.checked_add(1) != Some(block.index) {
        return Err(VerifyError::WrongIndex);
    }
    if block.prev_hash != current_head.hash {
        return Err(VerifyError::PrevHashMismatch);
    }
    if block.hash != block_hash(block) {
        return Err(VerifyError::HashMismatch);
    }
    let enough = meets_difficulty(&block.hash, block.difficulty).unwrap_or(false);
    if !enough || block.difficulty < params.min_difficulty {
        return Err(VerifyError::InsufficientWork);
    }
    Ok(())
}

/// Verifies a whole chain block by block from our genesis.
pub fn verify_chain(chain: &[Block], params: &ChainParams) -> Result<(), ChainChoiceError> {
    match chain.first() {
        Some(first) if *first == genesis_block() => {}
        _ => return Err(ChainChoiceError::GenesisMismatch),
    }
    for pair in chain.windows(2) {
        verify_block(&pair[1], &pair[0], params).map_err(|reason| ChainChoiceError::Invalid {
            index: pair[1].index,
            reason,
        })?;
    }
    Ok(())
}

/// Which side [`choose_chain`] picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainChoice {
    KeepLocal,
    AdoptCandidate,
}

/// Greatest cumulative work wins; ties keep what we already have.
pub fn choose_chain(
    local: &[Block],
    candidate: &[Block],
    params: &ChainParams,
) -> Result<ChainChoice, ChainChoiceError> {
    verify_chain(candidate, params)?;
    let candidate_work = cumulative_work(candidate).map_err(|_| ChainChoiceError::GenesisMismatch)?;
    // A local chain that fails linkage counts as zero work.
    let local_work = cumulative_work(local).unwrap_or(0);
    if candidate_work > local_work {
        Ok(ChainChoice::AdoptCandidate)
    } else {
        Ok(ChainChoice::KeepLocal)
    }
}

/// Sanity check on a linkage-only basis, for callers that already verified
/// the chain.
pub fn is_linked(chain: &[Block]) -> bool {
    check_linkage(chain).is_ok()
}
