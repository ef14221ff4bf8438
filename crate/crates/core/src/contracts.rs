//! Deterministic contract language.
//!
//! A contract is a JSON array of statements:
//!
//! ```text
//! stmt := ["set", key, expr] | ["add", key, expr] | ["sub", key, expr]
//!       | ["if", cond, [stmt...], [stmt...]]
//! expr := <i64> | ["get", key] | ["arg", i] | ["add"|"sub"|"mul", expr, expr]
//! cond := ["eq"|"lt", expr, expr]
//! ```
//!
//! Contracts are content addressed: the id is the SHA-256 of the source's
//! canonical JSON. Execution is all-or-nothing over an `i64` key-value view.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::FIELD_SEPARATOR;
use crate::wire::canonical_json;

pub const MAX_DEPTH: usize = 32;
pub const MAX_STATEMENTS: usize = 1024;
pub const STEP_LIMIT: u64 = 100_000;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecError {
    #[error("arithmetic overflow")]
    Overflow,
    #[error("nesting deeper than {MAX_DEPTH}")]
    DepthExceeded,
    #[error("step budget of {STEP_LIMIT} exhausted")]
    StepLimit,
    #[error("argument index {0} not supplied")]
    BadArgIndex(usize),
    #[error("malformed source at {position}: {detail}")]
    MalformedSource { position: String, detail: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContractError {
    #[error("no source available for contract {0}")]
    NotFound(String),
    #[error("source does not hash to contract id {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Compile(#[from] ExecError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Lit(i64),
    Get(String),
    Arg(usize),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Lt,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cond {
    pub op: CmpOp,
    pub lhs: Expr,
    pub rhs: Expr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Update {
    Set,
    Add,
    Sub,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Write { op: Update, key: String, value: Expr },
    If { cond: Cond, then: Vec<Stmt>, otherwise: Vec<Stmt> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompiledContract {
    pub contract_id: String,
    pub body: Vec<Stmt>,
    pub arg_count: usize,
    pub source: Value,
}

/// SHA-256 hex of the canonical JSON of `source`.
pub fn contract_id(source: &Value) -> Result<String, ExecError> {
    let bytes = canonical_json(source).map_err(|e| malformed("", e.to_string()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn malformed(position: &str, detail: impl Into<String>) -> ExecError {
    ExecError::MalformedSource {
        position: if position.is_empty() { "/".to_owned() } else { position.to_owned() },
        detail: detail.into(),
    }
}

struct Compiler {
    statements: usize,
    max_arg: Option<usize>,
}

impl Compiler {
    fn block(&mut self, value: &Value, at: &str, depth: usize) -> Result<Vec<Stmt>, ExecError> {
        let items = value.as_array().ok_or_else(|| malformed(at, "expected a statement list"))?;
        items
            .iter()
            .enumerate()
            .map(|(i, item)| self.stmt(item, &format!("{at}/{i}"), depth))
            .collect()
    }

    fn stmt(&mut self, value: &Value, at: &str, depth: usize) -> Result<Stmt, ExecError> {
        if depth > MAX_DEPTH {
            return Err(ExecError::DepthExceeded);
        }
        self.statements += 1;
        if self.statements > MAX_STATEMENTS {
            return Err(malformed(at, format!("more than {MAX_STATEMENTS} statements")));
        }
        let (op, rest) = split_form(value, at)?;
        match (op, rest.len()) {
            ("set" | "add" | "sub", 2) => {
                let key = key(&rest[0], &format!("{at}/1"))?;
                let value = self.expr(&rest[1], &format!("{at}/2"), depth + 1)?;
                let op = match op {
                    "set" => Update::Set,
                    "add" => Update::Add,
                    _ => Update::Sub,
                };
                Ok(Stmt::Write { op, key, value })
            }
            ("if", 3) => {
                let cond = self.cond(&rest[0], &format!("{at}/1"), depth + 1)?;
                let then = self.block(&rest[1], &format!("{at}/2"), depth + 1)?;
                let otherwise = self.block(&rest[2], &format!("{at}/3"), depth + 1)?;
                Ok(Stmt::If { cond, then, otherwise })
            }
            _ => Err(malformed(at, format!("unknown statement {op:?} with {} operands", rest.len()))),
        }
    }

    fn cond(&mut self, value: &Value, at: &str, depth: usize) -> Result<Cond, ExecError> {
        if depth > MAX_DEPTH {
            return Err(ExecError::DepthExceeded);
        }
        let (op, rest) = split_form(value, at)?;
        let op = match (op, rest.len()) {
            ("eq", 2) => CmpOp::Eq,
            ("lt", 2) => CmpOp::Lt,
            _ => return Err(malformed(at, format!("unknown condition {op:?}"))),
        };
        Ok(Cond {
            op,
            lhs: self.expr(&rest[0], &format!("{at}/1"), depth + 1)?,
            rhs: self.expr(&rest[1], &format!("{at}/2"), depth + 1)?,
        })
    }

    fn expr(&mut self, value: &Value, at: &str, depth: usize) -> Result<Expr, ExecError> {
        if depth > MAX_DEPTH {
            return Err(ExecError::DepthExceeded);
        }
        if let Value::Number(n) = value {
            return n
                .as_i64()
                .map(Expr::Lit)
                .ok_or_else(|| malformed(at, "literal is not a 64-bit signed integer"));
        }
        let (op, rest) = split_form(value, at)?;
        match (op, rest.len()) {
            ("get", 1) => Ok(Expr::Get(key(&rest[0], &format!("{at}/1"))?)),
            ("arg", 1) => {
                let index = rest[0]
                    .as_u64()
                    .and_then(|i| usize::try_from(i).ok())
                    .filter(|i| *i < MAX_STATEMENTS * 64)
                    .ok_or_else(|| malformed(&format!("{at}/1"), "argument index out of range"))?;
                self.max_arg = Some(self.max_arg.map_or(index, |m| m.max(index)));
                Ok(Expr::Arg(index))
            }
            ("add" | "sub" | "mul", 2) => {
                let bin = match op {
                    "add" => BinOp::Add,
                    "sub" => BinOp::Sub,
                    _ => BinOp::Mul,
                };
                let lhs = self.expr(&rest[0], &format!("{at}/1"), depth + 1)?;
                let rhs = self.expr(&rest[1], &format!("{at}/2"), depth + 1)?;
                Ok(Expr::Bin(bin, Box::new(lhs), Box::new(rhs)))
            }
            _ => Err(malformed(at, format!("unknown expression {op:?}"))),
        }
    }
}

fn split_form<'a>(value: &'a Value, at: &str) -> Result<(&'a str, &'a [Value]), ExecError> {
    let items = value.as_array().ok_or_else(|| malformed(at, "expected an array form"))?;
    let (head, rest) = items.split_first().ok_or_else(|| malformed(at, "empty form"))?;
    let op = head.as_str().ok_or_else(|| malformed(&format!("{at}/0"), "operator must be a string"))?;
    Ok((op, rest))
}

fn key(value: &Value, at: &str) -> Result<String, ExecError> {
    let key = value.as_str().ok_or_else(|| malformed(at, "key must be a string"))?;
    if key.as_bytes().contains(&FIELD_SEPARATOR) {
        return Err(malformed(at, "key contains 0x1F"));
    }
    Ok(key.to_owned())
}

/// Validates `source` and computes its id and argument arity.
pub fn compile(source: &Value) -> Result<CompiledContract, ExecError> {
    let mut compiler = Compiler { statements: 0, max_arg: None };
    let body = compiler.block(source, "", 1)?;
    Ok(CompiledContract {
        contract_id: contract_id(source)?,
        body,
        arg_count: compiler.max_arg.map_or(0, |m| m + 1),
        source: source.clone(),
    })
}

/// Key-value view a contract executes against.
pub trait StateView {
    fn get(&self, key: &str) -> Option<i64>;
    fn set(&mut self, key: &str, value: i64);
}

impl StateView for BTreeMap<String, i64> {
    fn get(&self, key: &str) -> Option<i64> {
        BTreeMap::get(self, key).copied()
    }

    fn set(&mut self, key: &str, value: i64) {
        self.insert(key.to_owned(), value);
    }
}

impl StateView for HashMap<String, i64> {
    fn get(&self, key: &str) -> Option<i64> {
        HashMap::get(self, key).copied()
    }

    fn set(&mut self, key: &str, value: i64) {
        self.insert(key.to_owned(), value);
    }
}

/// What a successful execution wrote, in key order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecOutcome {
    pub writes: BTreeMap<String, i64>,
    pub steps: u64,
}

/// Tree-walking evaluator. Limits are per instance so tests can shrink them.
#[derive(Clone, Debug)]
pub struct Interpreter {
    pub step_limit: u64,
    pub max_depth: usize,
}

impl Default for Interpreter {
    fn default() -> Self {
        Self { step_limit: STEP_LIMIT, max_depth: MAX_DEPTH }
    }
}

struct Run<'a> {
    args: &'a [i64],
    base: &'a dyn StateView,
    overlay: BTreeMap<String, i64>,
    steps: u64,
    limits: &'a Interpreter,
}

impl Run<'_> {
    fn tick(&mut self) -> Result<(), ExecError> {
        self.steps += 1;
        if self.steps > self.limits.step_limit {
            return Err(ExecError::StepLimit);
        }
        Ok(())
    }

    fn read(&self, key: &str) -> i64 {
        self.overlay
            .get(key)
            .copied()
            .or_else(|| self.base.get(key))
            .unwrap_or(0)
    }

    fn block(&mut self, stmts: &[Stmt], depth: usize) -> Result<(), ExecError> {
        for stmt in stmts {
            self.stmt(stmt, depth)?;
        }
        Ok(())
    }

    fn stmt(&mut self, stmt: &Stmt, depth: usize) -> Result<(), ExecError> {
        if depth > self.limits.max_depth {
            return Err(ExecError::DepthExceeded);
        }
        self.tick()?;
        match stmt {
            Stmt::Write { op, key, value } => {
                let v = self.expr(value, depth + 1)?;
                let next = match op {
                    Update::Set => v,
                    Update::Add => self.read(key).checked_add(v).ok_or(ExecError::Overflow)?,
                    Update::Sub => self.read(key).checked_sub(v).ok_or(ExecError::Overflow)?,
                };
                self.overlay.insert(key.clone(), next);
            }
            Stmt::If { cond, then, otherwise } => {
                if depth + 1 > self.limits.max_depth {
                    return Err(ExecError::DepthExceeded);
                }
                self.tick()?;
                let lhs = self.expr(&cond.lhs, depth + 2)?;
                let rhs = self.expr(&cond.rhs, depth + 2)?;
                let taken = match cond.op {
                    CmpOp::Eq => lhs == rhs,
                    CmpOp::Lt => lhs < rhs,
                };
                self.block(if taken { then } else { otherwise }, depth + 1)?;
            }
        }
        Ok(())
    }

    fn expr(&mut self, expr: &Expr, depth: usize) -> Result<i64, ExecError> {
        if depth > self.limits.max_depth {
            return Err(ExecError::DepthExceeded);
        }
        self.tick()?;
        match expr {
            Expr::Lit(v) => Ok(*v),
            Expr::Get(key) => Ok(self.read(key)),
            Expr::Arg(i) => self.args.get(*i).copied().ok_or(ExecError::BadArgIndex(*i)),
            Expr::Bin(op, lhs, rhs) => {
                let a = self.expr(lhs, depth + 1)?;
                let b = self.expr(rhs, depth + 1)?;
                match op {
                    BinOp::Add => a.checked_add(b),
                    BinOp::Sub => a.checked_sub(b),
                    BinOp::Mul => a.checked_mul(b),
                }
                .ok_or(ExecError::Overflow)
            }
        }
    }
}

impl Interpreter {
    /// Runs `contract` and, only if every statement succeeds, applies its
    /// writes to `state`.
    pub fn execute(
        &self,
        contract: &CompiledContract,
        args: &[i64],
        state: &mut dyn StateView,
    ) -> Result<ExecOutcome, ExecError> {
        if args.len() < contract.arg_count {
            return Err(ExecError::BadArgIndex(args.len()));
        }
        let mut run = Run { args, base: &*state, overlay: BTreeMap::new(), steps: 0, limits: self };
        run.block(&contract.body, 1)?;
        let Run { overlay, steps, .. } = run;
        for (key, value) in &overlay {
            state.set(key, *value);
        }
        Ok(ExecOutcome { writes: overlay, steps })
    }
}

/// Runs with default limits.
pub fn execute(
    contract: &CompiledContract,
    args: &[i64],
    state: &mut dyn StateView,
) -> Result<ExecOutcome, ExecError> {
    Interpreter::default().execute(contract, args, state)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub compiles: u64,
}

/// Compiled contracts keyed by id.
#[derive(Debug, Default)]
pub struct ContractCache {
    entries: RwLock<HashMap<String, Arc<CompiledContract>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    compiles: AtomicU64,
}

impl ContractCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the cached form, compiling from `source_provider` on a miss.
    pub fn cached_lookup<F>(&self, contract_id: &str, source_provider: F) -> Result<Arc<CompiledContract>, ContractError>
    where
        F: FnOnce(&str) -> Option<Value>,
    {
        if let Some(hit) = self.entries.read().expect("cache lock").get(contract_id) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(hit));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let source =
            source_provider(contract_id).ok_or_else(|| ContractError::NotFound(contract_id.to_owned()))?;
        let compiled = compile(&source)?;
        self.compiles.fetch_add(1, Ordering::Relaxed);
        if compiled.contract_id != contract_id {
            return Err(ContractError::IdMismatch(contract_id.to_owned()));
        }
        let compiled = Arc::new(compiled);
        self.entries
            .write()
            .expect("cache lock")
            .entry(contract_id.to_owned())
            .or_insert_with(|| Arc::clone(&compiled));
        Ok(compiled)
    }

    pub fn clear(&self) {
        self.entries.write().expect("cache lock").clear();
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counters(&self) -> CacheCounters {
        CacheCounters {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            compiles: self.compiles.load(Ordering::Relaxed),
        }
    }
}
