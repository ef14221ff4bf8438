use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use meshledger::chain::ChainParams;
use meshledger::node::{QueryResponse, TxPayload};
use meshledger::runtime::{run_node, Client, NodeConfig};
use meshledger::sim::{run_scenario, ScenarioConfig};
use serde_json::{json, Value};

const EXIT_REJECTED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NETWORK: u8 = 3;

#[derive(Parser)]
#[command(name = "meshledger", version, about = "Proof-of-work replicated ledger node, client and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a ledger node.
    Node {
        #[command(subcommand)]
        action: NodeAction,
    },
    /// Talk to a running node.
    Client {
        /// Node address, HOST:PORT.
        #[arg(long)]
        node: String,
        /// Seconds to wait for a reply (mining can take a while).
        #[arg(long, default_value_t = 300)]
        timeout: u64,
        #[command(subcommand)]
        request: Request,
    },
    /// Run simulated networks.
    Sim {
        #[command(subcommand)]
        action: SimAction,
    },
}

#[derive(Subcommand)]
enum NodeAction {
    Run {
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: String,
        /// Bootstrap peer, HOST:PORT. Repeatable.
        #[arg(long = "peer")]
        peers: Vec<String>,
        #[arg(long, default_value = "meshledger.db")]
        db: PathBuf,
        /// Initial difficulty in leading zero bits.
        #[arg(long, default_value_t = ChainParams::default().initial_difficulty)]
        difficulty: u32,
        /// Target block interval in milliseconds.
        #[arg(long = "target-interval", default_value_t = ChainParams::default().target_block_interval)]
        target_interval: u64,
        /// Identity key file; created if missing.
        #[arg(long, default_value = "meshledger.key")]
        key: PathBuf,
        /// Relay and serve but refuse to mine client transactions.
        #[arg(long = "no-mine")]
        no_mine: bool,
    },
}

#[derive(Subcommand)]
enum Request {
    /// Store a string on chain.
    Put { data: String },
    /// Deploy the contract source in FILE (JSON).
    Deploy { file: PathBuf },
    /// Call a deployed contract.
    Call {
        id: String,
        #[arg(long = "arg", allow_negative_numbers = true)]
        args: Vec<i64>,
    },
    Chain,
    Block { index: u64 },
    State { id: String, key: String },
    Stats,
}

#[derive(Subcommand)]
enum SimAction {
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; the consistency samples go next to it as CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Node { action } => node(action),
        Command::Client { node, timeout, request } => client(&node, Duration::from_secs(timeout), request),
        Command::Sim { action } => sim(action),
    }
}

fn node(action: NodeAction) -> ExitCode {
    let NodeAction::Run { listen, peers, db, difficulty, target_interval, key, no_mine } = action;
    let defaults = ChainParams::default();
    let params = ChainParams {
        target_block_interval: target_interval,
        initial_difficulty: difficulty,
        min_difficulty: defaults.min_difficulty.min(difficulty),
        max_difficulty: defaults.max_difficulty.max(difficulty),
        ..defaults
    };
    let config = NodeConfig { key_path: key, listen_addr: listen, peers, db_path: db, params, mining: !no_mine };
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install signal handler: {e}");
    }
    match run_node(config, shutdown) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn client(addr: &str, timeout: Duration, request: Request) -> ExitCode {
    let tx = match &request {
        Request::Put { data } => Some(TxPayload::Raw { data: data.clone() }),
        Request::Deploy { file } => match read_json(file) {
            Ok(contract) => Some(TxPayload::Deploy { contract }),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        Request::Call { id, args } => Some(TxPayload::Call { contract_id: id.clone(), args: args.clone() }),
        _ => None,
    };
    let mut conn = match Client::connect(addr, timeout) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_NETWORK);
        }
    };
    let response = match (tx, request) {
        (Some(tx), _) => conn.submit(tx),
        (None, Request::Chain) => conn.query("chain", Value::Null),
        (None, Request::Block { index }) => conn.query("block", json!({ "index": index })),
        (None, Request::State { id, key }) => conn.query("state", json!({ "contract_id": id, "key": key })),
        (None, _) => conn.query("stats", Value::Null),
    };
    match response {
        Ok(QueryResponse { ok: true, result, .. }) => {
            let out = result.unwrap_or(Value::Null);
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            ExitCode::SUCCESS
        }
        Ok(QueryResponse { error, .. }) => {
            eprintln!("error: {}", error.unwrap_or_else(|| "request failed".into()));
            ExitCode::from(EXIT_REJECTED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_NETWORK)
        }
    }
}

fn sim(action: SimAction) -> ExitCode {
    let SimAction::Run { scenario, seed, out } = action;
    let mut config: ScenarioConfig = match read_json(&scenario).and_then(|v| serde_json::from_value(v).map_err(|e| e.to_string())) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: scenario {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let report = match run_scenario(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: invalid scenario: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let csv_path = out.with_extension("csv");
    let written = std::fs::write(&out, report.to_json_pretty() + "\n")
        .and_then(|()| std::fs::write(&csv_path, report.consistency.to_csv()));
    if let Err(e) = written {
        eprintln!("error: writing report: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let c = report.consistency.c.map_or("n/a".to_owned(), |c| format!("{c:.6}"));
    println!(
        "committed {} tx, c = {c}, forks {}, rejected {} invalid blocks; report {} and {}",
        report.committed_tx_count,
        report.fork_count,
        report.rejected_invalid_blocks,
        out.display(),
        csv_path.display()
    );
    ExitCode::SUCCESS
}
