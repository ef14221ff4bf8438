//! Block data model, canonical preimage encoding, hashing and the
//! proof-of-work predicate.
//!
//! Everything in here is a pure function over immutable values.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Field separator inside the hash preimage (ASCII unit separator).
pub const FIELD_SEPARATOR: u8 = 0x1F;

/// Largest supported difficulty, in leading zero bits.
pub const MAX_DIFFICULTY_BITS: u32 = 32;

/// `prev_hash` of the genesis block.
pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

pub const GENESIS_DATA: &str = "GENESIS";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("malformed hash hex: {0:?}")]
    MalformedHash(String),
    #[error("difficulty {0} exceeds {MAX_DIFFICULTY_BITS} bits")]
    DifficultyOutOfRange(u32),
    #[error("chain is empty")]
    EmptyChain,
    #[error("broken linkage at position {position}")]
    BrokenLinkage { position: usize },
    #[error("invalid chain parameters: {0}")]
    InvalidParams(&'static str),
}

/// The chained unit of replicated data.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    /// Unix seconds, set by the block creator.
    pub timestamp: u64,
    pub data: String,
    pub prev_hash: String,
    /// Empty until the block is mined.
    pub hash: String,
    pub difficulty: u32,
    pub nonce: u64,
}

impl Block {
    /// Whether `hash` is what the preimage actually hashes to.
    pub fn has_valid_hash(&self) -> bool {
        self.hash == block_hash(self)
    }
}

/// Retargeting and proof-of-work knobs shared by every node of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    /// Target time between blocks, in milliseconds.
    pub target_block_interval: u64,
    pub initial_difficulty: u32,
    pub min_difficulty: u32,
    pub max_difficulty: u32,
    /// Per-step bounds `(lo, hi)` on the retarget factor.
    pub retarget_clamp: (f64, f64),
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            target_block_interval: 10_000,
            initial_difficulty: 8,
            min_difficulty: 1,
            max_difficulty: 24,
            retarget_clamp: (0.5, 2.0),
        }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<(), ChainError> {
        let ordered = 1 <= self.min_difficulty
            && self.min_difficulty <= self.initial_difficulty
            && self.initial_difficulty <= self.max_difficulty
            && self.max_difficulty <= MAX_DIFFICULTY_BITS;
        if !ordered {
            return Err(ChainError::InvalidParams(
                "need 1 <= min <= initial <= max <= 32 difficulty bits",
            ));
        }
        let (lo, hi) = self.retarget_clamp;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(ChainError::InvalidParams("need 0 < lo <= 1 <= hi retarget clamp"));
        }
        if self.target_block_interval == 0 {
            return Err(ChainError::InvalidParams("target block interval must be positive"));
        }
        Ok(())
    }
}

/// Bytes that are hashed to produce a block's `hash`. The `hash` field itself
/// is not part of the preimage.
pub fn canonical_block_bytes(block: &Block) -> Vec<u8> {
    let mut out = Vec::with_capacity(block.data.len() + 128);
    let sep = FIELD_SEPARATOR;
    out.extend_from_slice(block.index.to_string().as_bytes());
    out.push(sep);
    out.extend_from_slice(block.timestamp.to_string().as_bytes());
    out.push(sep);
    out.extend_from_slice(block.data.as_bytes());
    out.push(sep);
    out.extend_from_slice(block.prev_hash.as_bytes());
    out.push(sep);
    out.extend_from_slice(block.difficulty.to_string().as_bytes());
    out.push(sep);
    out.extend_from_slice(block.nonce.to_string().as_bytes());
    out
}

/// Lowercase hex SHA-256 of [`canonical_block_bytes`].
pub fn block_hash(block: &Block) -> String {
    hex::encode(Sha256::digest(canonical_block_bytes(block)))
}

pub fn is_hash_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// True iff the first `bits` bits of the digest are zero, reading byte 0
/// most significant bit first.
pub fn meets_difficulty(hash_hex: &str, bits: u32) -> Result<bool, ChainError> {
    if bits > MAX_DIFFICULTY_BITS {
        return Err(ChainError::DifficultyOutOfRange(bits));
    }
    let digest = hex::decode(hash_hex).map_err(|_| ChainError::MalformedHash(hash_hex.to_owned()))?;
    if digest.len() != 32 {
        return Err(ChainError::MalformedHash(hash_hex.to_owned()));
    }
    Ok(leading_zero_bits(&digest) >= bits)
}

pub(crate) fn leading_zero_bits(digest: &[u8]) -> u32 {
    let mut zeros = 0;
    for byte in digest {
        if *byte == 0 {
            zeros += 8;
        } else {
            zeros += byte.leading_zeros();
            break;
        }
    }
    zeros
}

/// The fixed root every node shares. Exempt from proof of work.
pub fn genesis_block() -> Block {
    let mut genesis = Block {
        index: 0,
        timestamp: 0,
        data: GENESIS_DATA.to_owned(),
        prev_hash: ZERO_HASH.to_owned(),
        hash: String::new(),
        difficulty: 0,
        nonce: 0,
    };
    genesis.hash = block_hash(&genesis);
    genesis
}

/// Expected hashing effort of a single block.
pub fn block_work(block: &Block) -> u128 {
    1u128 << block.difficulty.min(MAX_DIFFICULTY_BITS)
}

/// Checks index density and `prev_hash` linkage, without re-hashing.
pub fn check_linkage(chain: &[Block]) -> Result<(), ChainError> {
    let first = chain.first().ok_or(ChainError::EmptyChain)?;
    if first.index != 0 || first.prev_hash != ZERO_HASH {
        return Err(ChainError::BrokenLinkage { position: 0 });
    }
    for (position, pair) in chain.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.index != prev.index + 1 || next.prev_hash != prev.hash {
            return Err(ChainError::BrokenLinkage { position: position + 1 });
        }
    }
    Ok(())
}

/// Sum of `2^difficulty` over every non-genesis block.
pub fn cumulative_work(chain: &[Block]) -> Result<u128, ChainError> {
    check_linkage(chain)?;
    Ok(chain.iter().skip(1).map(block_work).sum())
}
