//! `recsync` command-line entry point.
//!
//! Exit codes: 0 success, 1 replay mismatch, 2 usage or configuration
//! error, 3 reconciliation finished with unrecoverable holes, 4 I/O or
//! format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recsync_core::channel::LinkName;
use recsync_core::node::CounterMode;
use recsync_core::simulator::Transport;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "recsync", version, about = "Record-id synchronization of dual-written sensor telemetry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write stores, manifest, metrics and figure CSVs.
    Simulate(SimulateArgs),
    /// Serve the HTTP ingestion endpoint in the foreground.
    Serve(ServeArgs),
    /// Diff two store files by record id, recover both ways, report.
    Reconcile(ReconcileArgs),
    /// Compare redundancy of timestamp-keyed and id-keyed merges.
    Analyze(AnalyzeArgs),
    /// Rebuild stores from a request log and check them against store files.
    Replay(ReplayArgs),
    /// Print a bundled scenario file (`paper` or `collision`).
    Scenario {
        name: String,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    /// Bundled scenario: `paper` or `collision`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides the scenario transport.
    #[arg(long, value_parser = parse_transport)]
    transport: Option<Transport>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario counter mode.
    #[arg(long, value_parser = parse_counter_mode)]
    counter_mode: Option<CounterMode>,
    /// Keep the node counter in this file instead of memory.
    #[arg(long)]
    counter_file: Option<PathBuf>,
    /// Also write every delivered request as `<link>\t<form body>`.
    #[arg(long)]
    request_log: Option<PathBuf>,
    /// Print metrics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// JSONL store file; loaded if present, appended on every insert.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "local", value_parser = parse_link)]
    kind: LinkName,
}

#[derive(Debug, Args)]
struct ReconcileArgs {
    #[arg(long)]
    local: PathBuf,
    #[arg(long)]
    online: PathBuf,
    /// Generator manifest; without it holes are a lower bound.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the synchronized stores into this directory.
    #[arg(long)]
    synced_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    local: PathBuf,
    #[arg(long)]
    online: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Request log written by `simulate --request-log`.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    local: PathBuf,
    #[arg(long)]
    online: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `direct` feeds the handlers in-process; `loopback` posts over HTTP.
    #[arg(long, default_value = "direct", value_parser = parse_transport)]
    transport: Transport,
    #[arg(long)]
    json: bool,
}

fn parse_transport(s: &str) -> Result<Transport, String> {
    s.parse()
}

fn parse_counter_mode(s: &str) -> Result<CounterMode, String> {
    s.parse()
}

fn parse_link(s: &str) -> Result<LinkName, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Serve(a) => commands::serve(a),
        Command::Reconcile(a) => commands::reconcile(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Replay(a) => commands::replay(a),
        Command::Scenario { name } => commands::scenario(&name),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("recsync: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
