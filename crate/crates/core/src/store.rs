//! Durable chain and contract-state storage.
//!
//! One file per node. Layout:
//!
//! ```text
//! FILE   := MAGIC RECORD*
//! RECORD := len:u32be crc32(body):u32be body
//! body   := JSON of Record
//! ```
//!
//! Appends are a single record write followed by fsync. On open the file is
//! scanned and anything after the last intact, well-linked record is cut
//! off, so a crash mid-append leaves the previous state. Chain replacement
//! writes a complete new file and renames it over the old one.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::chain::{check_linkage, genesis_block, Block};

const MAGIC: &[u8; 8] = b"MLSTORE1";
const RECORD_HEADER: usize = 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("block index {got} does not extend a store of {count} blocks")]
    WrongIndex { got: u64, count: u64 },
    #[error("block does not link to the stored tip")]
    BrokenLink,
    #[error("replacement chain rejected: {0}")]
    Rejected(&'static str),
    #[error("not found")]
    NotFound,
    #[error("store file is not a block store")]
    BadMagic,
    #[error("store is unusable after an earlier write failure")]
    Poisoned,
    #[error("persistence failure: {0}")]
    Io(#[from] io::Error),
}

/// One write to contract state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateWrite {
    pub contract_id: String,
    pub key: String,
    pub value: i64,
}

/// Everything executing one block changed: state writes, newly deployed
/// contract sources, and the execution outcome for the log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateCommit {
    pub index: u64,
    #[serde(default)]
    pub writes: Vec<StateWrite>,
    #[serde(default)]
    pub deploys: Vec<(String, Value)>,
    #[serde(default)]
    pub outcome: Option<String>,
}

impl StateCommit {
    pub fn empty(index: u64) -> Self {
        Self { index, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateEntry {
    pub value: i64,
    /// Index of the block whose commit last wrote this key.
    pub version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
enum Record {
    Block { block: Block },
    State { commit: StateCommit },
}

/// Deterministic write failure for crash testing: the next write stops after
/// this many bytes and the store behaves as if the process died.
#[doc(hidden)]
#[derive(Clone, Copy, Debug)]
pub struct CrashAfter(pub u64);

enum Backend {
    Memory,
    File {
        path: PathBuf,
        file: File,
        crash: Option<CrashAfter>,
    },
}

#[derive(Default)]
struct Contents {
    blocks: Vec<Block>,
    state: BTreeMap<(String, String), StateEntry>,
    contracts: BTreeMap<String, Value>,
    outcomes: BTreeMap<u64, String>,
    state_height: Option<u64>,
}

impl Contents {
    fn accepts_block(&self, block: &Block) -> Result<(), StoreError> {
        let count = self.blocks.len() as u64;
        if block.index != count {
            return Err(StoreError::WrongIndex { got: block.index, count });
        }
        let linked = match self.blocks.last() {
            Some(tip) => block.prev_hash == tip.hash,
            None => *block == genesis_block(),
        };
        if !linked || !block.has_valid_hash() {
            return Err(StoreError::BrokenLink);
        }
        Ok(())
    }

    fn apply_commit(&mut self, commit: &StateCommit) {
        for w in &commit.writes {
            self.state.insert(
                (w.contract_id.clone(), w.key.clone()),
                StateEntry { value: w.value, version: commit.index },
            );
        }
        for (id, source) in &commit.deploys {
            self.contracts.entry(id.clone()).or_insert_with(|| source.clone());
        }
        if let Some(outcome) = &commit.outcome {
            self.outcomes.insert(commit.index, outcome.clone());
        }
        self.state_height = Some(self.state_height.map_or(commit.index, |h| h.max(commit.index)));
    }
}

struct Inner {
    contents: Contents,
    backend: Backend,
    poisoned: bool,
}

/// Chain plus contract state behind one lock: writers are exclusive,
/// readers share.
pub struct BlockStore {
    inner: RwLock<Inner>,
}

fn encode(record: &Record) -> Vec<u8> {
    let body = serde_json::to_vec(record).expect("record serializes");
    let mut out = Vec::with_capacity(body.len() + RECORD_HEADER);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Writes `bytes`, stopping early if a crash is scheduled.
fn write_with_crash(file: &mut File, bytes: &[u8], crash: &mut Option<CrashAfter>) -> io::Result<()> {
    if let Some(CrashAfter(limit)) = crash.take() {
        let cut = (limit as usize).min(bytes.len());
        file.write_all(&bytes[..cut])?;
        file.sync_data()?;
        if cut < bytes.len() {
            return Err(io::Error::other("injected crash"));
        }
        *crash = None;
        return Ok(());
    }
    file.write_all(bytes)
}

/// Scans records from `data`, returning the recovered contents and the byte
/// length of the intact prefix.
fn recover(data: &[u8]) -> Result<(Contents, u64), StoreError> {
    if data.len() < MAGIC.len() || &data[..MAGIC.len()] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let mut contents = Contents::default();
    let mut pos = MAGIC.len();
    while data.len() - pos >= RECORD_HEADER {
        let len = u32::from_be_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_be_bytes(data[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + RECORD_HEADER;
        let Some(body) = data.get(start..start + len) else { break };
        if crc32fast::hash(body) != crc {
            break;
        }
        let Ok(record) = serde_json::from_slice::<Record>(body) else { break };
        match record {
            Record::Block { block } => {
                if contents.accepts_block(&block).is_err() {
                    break;
                }
                contents.blocks.push(block);
            }
            Record::State { commit } => {
                if commit.index >= contents.blocks.len() as u64 {
                    break;
                }
                contents.apply_commit(&commit);
            }
        }
        pos = start + len;
    }
    Ok((contents, pos as u64))
}

impl BlockStore {
    /// Opens or creates the store at `path`, discarding any torn tail.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_inner(path.as_ref(), None)
    }

    #[doc(hidden)]
    pub fn open_with_crash(path: impl AsRef<Path>, crash: CrashAfter) -> Result<Self, StoreError> {
        Self::open_inner(path.as_ref(), Some(crash))
    }

    fn open_inner(path: &Path, crash: Option<CrashAfter>) -> Result<Self, StoreError> {
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        if data.is_empty() {
            file.write_all(MAGIC)?;
            file.sync_all()?;
            data.extend_from_slice(MAGIC);
        }
        let (contents, good_len) = recover(&data)?;
        if good_len < data.len() as u64 {
            log::warn!(
                "{}: discarding {} bytes of torn tail",
                path.display(),
                data.len() as u64 - good_len
            );
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            inner: RwLock::new(Inner {
                contents,
                backend: Backend::File { path: path.to_owned(), file, crash },
                poisoned: false,
            }),
        })
    }

    /// Volatile store with the same contract, for simulations.
    pub fn in_memory() -> Self {
        Self {
            inner: RwLock::new(Inner {
                contents: Contents::default(),
                backend: Backend::Memory,
                poisoned: false,
            }),
        }
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().expect("store lock poisoned")
    }

    fn write(&self) -> Result<RwLockWriteGuard<'_, Inner>, StoreError> {
        let guard = self.inner.write().expect("store lock poisoned");
        if guard.poisoned {
            return Err(StoreError::Poisoned);
        }
        Ok(guard)
    }

    fn append(inner: &mut Inner, record: &Record) -> Result<(), StoreError> {
        let Backend::File { file, crash, .. } = &mut inner.backend else { return Ok(()) };
        let bytes = encode(record);
        let before = file.metadata()?.len();
        let injected = crash.is_some();
        let result = write_with_crash(file, &bytes, crash).and_then(|_| file.sync_data());
        if let Err(e) = result {
            // A simulated crash leaves the torn bytes for recovery to find;
            // a real failure is rolled back so the store stays usable.
            if injected || file.set_len(before).and_then(|_| file.seek(SeekFrom::End(0))).is_err() {
                inner.poisoned = true;
            }
            return Err(e.into());
        }
        Ok(())
    }

    /// Appends a block that extends the stored tip.
    pub fn add_block(&self, block: &Block) -> Result<(), StoreError> {
        let mut inner = self.write()?;
        inner.contents.accepts_block(block)?;
        Self::append(&mut inner, &Record::Block { block: block.clone() })?;
        inner.contents.blocks.push(block.clone());
        Ok(())
    }

    pub fn get_block_count(&self) -> u64 {
        self.read().contents.blocks.len() as u64
    }

    pub fn get_latest_block_hash(&self) -> Result<String, StoreError> {
        self.read().contents.blocks.last().map(|b| b.hash.clone()).ok_or(StoreError::NotFound)
    }

    pub fn tip(&self) -> Option<Block> {
        self.read().contents.blocks.last().cloned()
    }

    pub fn get_block(&self, index: u64) -> Result<Block, StoreError> {
        let inner = self.read();
        usize::try_from(index)
            .ok()
            .and_then(|i| inner.contents.blocks.get(i))
            .cloned()
            .ok_or(StoreError::NotFound)
    }

    pub fn get_all_blocks(&self) -> Vec<Block> {
        self.read().contents.blocks.clone()
    }

    /// Blocks from `from` (inclusive) to the tip.
    pub fn blocks_from(&self, from: u64) -> Vec<Block> {
        let inner = self.read();
        let from = usize::try_from(from).unwrap_or(usize::MAX).min(inner.contents.blocks.len());
        inner.contents.blocks[from..].to_vec()
    }

    pub fn contains_hash_at(&self, index: u64, hash: &str) -> bool {
        self.get_block(index).map(|b| b.hash == hash).unwrap_or(false)
    }

    /// Atomically swaps the whole chain. `replay` re-executes the new chain
    /// and returns the state commits to persist alongside it.
    pub fn replace_chain<F>(&self, new_chain: &[Block], replay: F) -> Result<(), StoreError>
    where
        F: FnOnce(&[Block]) -> Vec<StateCommit>,
    {
        if new_chain.first() != Some(&genesis_block()) {
            return Err(StoreError::Rejected("genesis differs"));
        }
        if check_linkage(new_chain).is_err() || !new_chain.iter().all(Block::has_valid_hash) {
            return Err(StoreError::Rejected("chain is not linked"));
        }
        let mut inner = self.write()?;
        let commits = replay(new_chain);

        let mut contents = Contents::default();
        for block in new_chain {
            contents.blocks.push(block.clone());
        }
        let mut image = MAGIC.to_vec();
        for block in new_chain {
            image.extend(encode(&Record::Block { block: block.clone() }));
        }
        for commit in &commits {
            if commit.index >= new_chain.len() as u64 {
                return Err(StoreError::Rejected("state commit beyond chain"));
            }
            contents.apply_commit(commit);
            image.extend(encode(&Record::State { commit: commit.clone() }));
        }

        if let Backend::File { path, file, crash } = &mut inner.backend {
            let injected = crash.is_some();
            let tmp = path.with_extension("replace.tmp");
            let staged = (|| -> io::Result<File> {
                let mut out = File::create(&tmp)?;
                write_with_crash(&mut out, &image, crash)?;
                out.sync_all()?;
                drop(out);
                fs::rename(&tmp, &*path)?;
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    if let Ok(d) = File::open(dir) {
                        let _ = d.sync_all();
                    }
                }
                let mut reopened = OpenOptions::new().read(true).write(true).open(&*path)?;
                reopened.seek(SeekFrom::End(0))?;
                Ok(reopened)
            })();
            match staged {
                Ok(reopened) => *file = reopened,
                Err(e) => {
                    let _ = fs::remove_file(&tmp);
                    if injected {
                        inner.poisoned = true;
                    }
                    return Err(e.into());
                }
            }
        }
        inner.contents = contents;
        Ok(())
    }

    /// Persists one block's state changes.
    pub fn commit_state(&self, commit: &StateCommit) -> Result<(), StoreError> {
        let mut inner = self.write()?;
        if commit.index >= inner.contents.blocks.len() as u64 {
            return Err(StoreError::NotFound);
        }
        Self::append(&mut inner, &Record::State { commit: commit.clone() })?;
        inner.contents.apply_commit(commit);
        Ok(())
    }

    pub fn get_state(&self, contract_id: &str, key: &str) -> Option<i64> {
        self.get_state_entry(contract_id, key).map(|e| e.value)
    }

    pub fn get_state_entry(&self, contract_id: &str, key: &str) -> Option<StateEntry> {
        self.read()
            .contents
            .state
            .get(&(contract_id.to_owned(), key.to_owned()))
            .copied()
    }

    /// Durable single-key write, versioned at the current tip.
    pub fn put_state(&self, contract_id: &str, key: &str, value: i64) -> Result<(), StoreError> {
        let index = self.get_block_count().checked_sub(1).ok_or(StoreError::NotFound)?;
        self.commit_state(&StateCommit {
            index,
            writes: vec![StateWrite { contract_id: contract_id.into(), key: key.into(), value }],
            ..StateCommit::default()
        })
    }

    /// All values of one contract, in key order.
    pub fn contract_state(&self, contract_id: &str) -> BTreeMap<String, i64> {
        self.read()
            .contents
            .state
            .iter()
            .filter(|((id, _), _)| id == contract_id)
            .map(|((_, key), entry)| (key.clone(), entry.value))
            .collect()
    }

    /// Every `(contract_id, key) → value`.
    pub fn state_snapshot(&self) -> BTreeMap<(String, String), i64> {
        self.read().contents.state.iter().map(|(k, e)| (k.clone(), e.value)).collect()
    }

    pub fn contract_source(&self, contract_id: &str) -> Option<Value> {
        self.read().contents.contracts.get(contract_id).cloned()
    }

    pub fn contract_ids(&self) -> Vec<String> {
        self.read().contents.contracts.keys().cloned().collect()
    }

    /// Execution outcome recorded for block `index`, if it failed or did
    /// something worth logging.
    pub fn exec_outcome(&self, index: u64) -> Option<String> {
        self.read().contents.outcomes.get(&index).cloned()
    }

    /// Highest block index whose state commit is durable.
    pub fn state_height(&self) -> Option<u64> {
        self.read().contents.state_height
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        let inner = self.read();
        if let Backend::File { file, .. } = &inner.backend {
            file.sync_all()?;
        }
        Ok(())
    }
}
