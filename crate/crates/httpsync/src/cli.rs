//! Command-line entry points: run a single hop, drive a scenario config
//! through a process chain, measure overhead, or mint a key.

use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::harness::bench::{self, BenchConfig};
use crate::harness::scenario::{self, RunOptions, ScenarioConfig};
use crate::node::{self, NodeConfig, OnInvalid, PathRewrite, StdoutSink, TransferMode};
use crate::sync::{SyncKey, ValidationPolicy};
use crate::wire::ParserPersonality;

#[derive(Parser)]
#[command(
    name = "httpsync",
    about = "Proxy hops that exchange authenticated processing history, \
             and a harness for reproducing request-discrepancy attacks against them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a forwarding hop that proxies to --upstream.
    RunNode(ProxyArgs),
    /// Run a terminal hop that answers requests itself.
    RunOrigin(NodeArgs),
    /// Drive a scenario config through a freshly spawned process chain.
    RunScenario(ScenarioArgs),
    /// Measure round-trip overhead of a synchronized chain vs an oblivious one.
    Bench(BenchArgs),
    /// Generate a new shared key file.
    Keygen(KeygenArgs),
}

#[derive(Args)]
struct ProxyArgs {
    /// Address of the next hop.
    #[arg(long)]
    upstream: SocketAddr,
    #[command(flatten)]
    node: NodeArgs,
}

#[derive(Args)]
struct NodeArgs {
    /// Address to listen on; port 0 picks a free port (reported in READY).
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: SocketAddr,
    /// Shared key file (64 hex chars). Required unless --oblivious.
    #[arg(long, env = "HTTPSYNC_KEY_FILE")]
    key_file: Option<PathBuf>,
    /// Parser preset for this hop.
    #[arg(long, default_value = "strict-gateway")]
    personality: String,
    /// JSON file with transition rules licensing specific rewrites.
    #[arg(long)]
    policy_file: Option<PathBuf>,
    /// Forward bodies as they arrive, or buffer them fully first.
    #[arg(long, value_enum, default_value_t = ModeArg::Streaming)]
    mode: ModeArg,
    /// Take no part in synchronization: forward heads untouched.
    #[arg(long)]
    oblivious: bool,
    /// What the client sees when a request is refused.
    #[arg(long, value_enum, default_value_t = OnInvalidArg::Close)]
    on_invalid: OnInvalidArg,
    /// Emit SNAPSHOT records of history values seen and sent.
    #[arg(long)]
    verbose: bool,
    /// Rewrite an exactly matching path before forwarding, as from=to.
    #[arg(long, value_name = "FROM=TO")]
    rewrite_path: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Streaming,
    Buffering,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnInvalidArg {
    /// Drop the connection without a response.
    Close,
    /// Send a 400 before closing.
    #[value(name = "400")]
    Respond400,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario config (JSON).
    config: PathBuf,
    /// Run every hop oblivious and grade against baseline_expectations.
    #[arg(long)]
    baseline: bool,
    /// Spawn hops with --verbose and include history snapshots in the report.
    #[arg(long)]
    verbose: bool,
    /// Write the full JSON report here in addition to the summary on stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// How long the client waits on each payload before calling it blocked.
    #[arg(long, default_value_t = 2000)]
    client_timeout_ms: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    /// All body sizes up to 10MB and every feasible chunk count.
    Full,
    /// Content-Length bodies to 1MiB plus a 100KiB chunk-count spread.
    Quick,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = GridArg::Full)]
    grid: GridArg,
    /// Custom grid (JSON BenchConfig); overrides --grid.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override timed iterations per cell.
    #[arg(long)]
    iterations: Option<u32>,
    /// Write results as JSON here in addition to the table on stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KeygenArgs {
    /// Where to write the key file (created with mode 0600).
    #[arg(long)]
    out: PathBuf,
}

/// Parse arguments and run. Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunNode(args) => run_hop(Some(args.upstream), args.node),
        Command::RunOrigin(args) => run_hop(None, args),
        Command::RunScenario(args) => run_scenario(args),
        Command::Bench(args) => run_bench(args),
        Command::Keygen(args) => keygen(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("httpsync: {e}");
            2
        }
    }
}

fn run_hop(upstream: Option<SocketAddr>, args: NodeArgs) -> io::Result<i32> {
    let personality = ParserPersonality::preset(&args.personality).ok_or_else(|| {
        bad_args(format!(
            "unknown personality {:?}; one of: {}",
            args.personality,
            ParserPersonality::preset_names().join(", ")
        ))
    })?;

    let mut cfg = match upstream {
        Some(up) => NodeConfig::proxy(up, personality),
        None => NodeConfig::origin(personality),
    };
    cfg.listen = args.listen;
    cfg = cfg.with_label(&args.personality);
    cfg.transfer_mode = match args.mode {
        ModeArg::Streaming => TransferMode::Streaming,
        ModeArg::Buffering => TransferMode::Buffering,
    };
    cfg.on_invalid = match args.on_invalid {
        OnInvalidArg::Close => OnInvalid::CloseConnection,
        OnInvalidArg::Respond400 => OnInvalid::Respond400ThenClose,
    };
    cfg.verbose = args.verbose;

    if let Some(spec) = &args.rewrite_path {
        let (from, to) = spec
            .split_once('=')
            .ok_or_else(|| bad_args("--rewrite-path wants FROM=TO"))?;
        cfg.rewrite_path = Some(PathRewrite { from: from.into(), to: to.into() });
    }

    if args.oblivious {
        if args.key_file.is_some() {
            return Err(bad_args("--oblivious and --key-file are mutually exclusive"));
        }
    } else {
        let key_path = args
            .key_file
            .ok_or_else(|| bad_args("--key-file required (or set HTTPSYNC_KEY_FILE, or pass --oblivious)"))?;
        let key = SyncKey::from_file(&key_path)
            .map_err(|e| io::Error::other(format!("{}: {e}", key_path.display())))?;
        let policy = match &args.policy_file {
            Some(path) => {
                let bytes = std::fs::read(path)?;
                serde_json::from_slice::<ValidationPolicy>(&bytes)
                    .map_err(|e| io::Error::other(format!("{}: {e}", path.display())))?
            }
            None => ValidationPolicy::default(),
        };
        cfg = cfg.with_sync(key, policy);
    }

    node::run_node(cfg, Arc::new(StdoutSink))?;
    Ok(0)
}

fn run_scenario(args: ScenarioArgs) -> io::Result<i32> {
    let bytes = std::fs::read(&args.config)?;
    let cfg: ScenarioConfig = serde_json::from_slice(&bytes)
        .map_err(|e| io::Error::other(format!("{}: {e}", args.config.display())))?;
    let binary = std::env::current_exe()?;
    let report = scenario::run_scenario(
        &cfg,
        &RunOptions {
            binary: &binary,
            defended: !args.baseline,
            verbose: args.verbose,
            client_timeout: Duration::from_millis(args.client_timeout_ms),
        },
    )?;
    print!("{}", scenario::render_summary(&report));
    io::stdout().flush()?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(if report.all_met { 0 } else { 1 })
}

fn run_bench(args: BenchArgs) -> io::Result<i32> {
    let mut cfg: BenchConfig = match &args.config {
        Some(path) => {
            let bytes = std::fs::read(path)?;
            serde_json::from_slice(&bytes)
                .map_err(|e| io::Error::other(format!("{}: {e}", path.display())))?
        }
        None => match args.grid {
            GridArg::Full => bench::default_grid(),
            GridArg::Quick => bench::acceptance_grid(),
        },
    };
    if let Some(iters) = args.iterations {
        cfg.iterations = iters.max(1);
    }
    let results = bench::run_bench(&cfg)?;
    print!("{}", bench::render_bench_table(&results));
    io::stdout().flush()?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_vec_pretty(&results)?)?;
    }
    Ok(0)
}

fn keygen(args: KeygenArgs) -> io::Result<i32> {
    let key = SyncKey::generate();
    key.write_to_file(&args.out)
        .map_err(|e| io::Error::other(format!("{}: {e}", args.out.display())))?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn bad_args(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidInput, msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
