use std::fs;
use std::io::Write;
use std::path::Path;

use recsync_core::channel::LinkName;
use recsync_core::ingest::{IngestClient, IngestError, IngestServer, IngestState};
use recsync_core::node::{FileCounter, PersistentCounter};
use recsync_core::reconciler::{
    id_merge, reconcile as reconcile_stores, sync_rate, timestamp_merge_baseline, Manifest,
    MergeCount, Percent, ReconcileError, TIMESTAMP_DUPLICATE_RULE,
};
use recsync_core::simulator::{
    bundled_scenario_text, parse_log_line, replay_log, run_with_counter, write_outputs,
    ScenarioConfig, SimError, Transport,
};
use recsync_core::store::{ServerStore, StoreError};
use serde::Serialize;
use thiserror::Error;

use crate::{AnalyzeArgs, ReconcileArgs, ReplayArgs, ServeArgs, SimulateArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_MISMATCH: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_HOLES: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_IO,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Parse { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ReconcileError> for CliError {
    fn from(e: ReconcileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

type CmdResult = Result<u8, CliError>;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output types serialize");
    s.push('\n');
    s
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let mut scenario = match (&a.scenario, &a.preset) {
        (Some(path), _) => ScenarioConfig::load(path)?,
        (None, Some(name)) => {
            let text = bundled_scenario_text(name)
                .ok_or_else(|| CliError::Usage(format!("unknown preset {name:?} (expected paper or collision)")))?;
            ScenarioConfig::from_toml_str(text).map_err(CliError::Usage)?
        }
        (None, None) => return Err(CliError::Usage("--scenario or --preset is required".into())),
    };
    if let Some(t) = a.transport {
        scenario.transport = t;
    }
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if let Some(mode) = a.counter_mode {
        scenario.node.counter_mode = mode;
    }
    scenario.validate()?;
    let counter = match &a.counter_file {
        Some(path) => PersistentCounter::new(FileCounter::new(path)),
        None => PersistentCounter::in_memory(),
    };
    let run = run_with_counter(&scenario, counter)?;
    let files = write_outputs(&run, &a.out)?;
    if let Some(path) = &a.request_log {
        write_text(path, &run.request_log())?;
    }
    let m = &run.metrics;
    if a.json {
        print!("{}", json(m));
    } else {
        println!("scenario          {}", m.scenario);
        println!("generated         {}", m.generated);
        println!("local received    {}", m.delivered_local);
        println!("online received   {}", m.delivered_online);
        println!("lost local        {}", m.lost_local);
        println!("lost online       {}", m.lost_online);
        println!("lost on both      {}", m.lost_both);
        for f in &files {
            println!("wrote {}", f.display());
        }
    }
    Ok(EXIT_OK)
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let state = IngestState::with_store_file(a.kind, &a.store)?;
    let server = IngestServer::start(state, a.port)?;
    println!("listening on {}", server.base_url());
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(EXIT_OK)
}

pub fn reconcile(a: ReconcileArgs) -> CmdResult {
    let local = ServerStore::import(&a.local, LinkName::Local)?;
    let online = ServerStore::import(&a.online, LinkName::Online)?;
    let manifest = a.manifest.as_deref().map(load_manifest).transpose()?;
    let outcome = reconcile_stores(&local, &online, manifest.as_ref())?;
    let report = &outcome.report;
    if let Some(path) = &a.out {
        write_text(path, &json(report))?;
    }
    if let Some(dir) = &a.synced_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        outcome.local.export(&dir.join("local.jsonl"))?;
        outcome.online.export(&dir.join("online.jsonl"))?;
    }
    if a.json {
        print!("{}", json(report));
    } else {
        println!("generated         {}", report.generated);
        println!("received local    {}", report.received_local);
        println!("received online   {}", report.received_online);
        println!("copy to online    {}", report.to_online);
        println!("copy to local     {}", report.to_local);
        println!("unrecoverable     {}", report.unrecoverable);
        println!("synchronized      {}", report.synchronized);
        println!("sync rate         {}%", report.sync_rate_percent);
    }
    Ok(if report.unrecoverable > 0 { EXIT_HOLES } else { EXIT_OK })
}

#[derive(Debug, Serialize)]
struct MergeSummary {
    merged_rows: usize,
    duplicates: usize,
    duplicate_percent: Percent,
}

impl From<MergeCount> for MergeSummary {
    fn from(m: MergeCount) -> Self {
        MergeSummary {
            merged_rows: m.merged_rows,
            duplicates: m.duplicates,
            duplicate_percent: if m.merged_rows == 0 {
                Percent::from_hundredths(0)
            } else {
                sync_rate(m.duplicates as u64, m.merged_rows as u64)
            },
        }
    }
}

#[derive(Debug, Serialize)]
struct Redundancy {
    timestamp_merge: MergeSummary,
    id_merge: MergeSummary,
    timestamp_duplicate_rule: &'static str,
}

pub fn analyze(a: AnalyzeArgs) -> CmdResult {
    let local = ServerStore::import(&a.local, LinkName::Local)?;
    let online = ServerStore::import(&a.online, LinkName::Online)?;
    let report = Redundancy {
        timestamp_merge: timestamp_merge_baseline(&local, &online).into(),
        id_merge: id_merge(&local, &online)?.into(),
        timestamp_duplicate_rule: TIMESTAMP_DUPLICATE_RULE,
    };
    if a.json {
        print!("{}", json(&report));
    } else {
        for (name, m) in [("timestamp", &report.timestamp_merge), ("record id", &report.id_merge)] {
            println!(
                "{name:<10} merged {:>6} rows, {:>6} redundant ({}%)",
                m.merged_rows, m.duplicates, m.duplicate_percent
            );
        }
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct ReplaySummary {
    requests: u64,
    inserted: u64,
    duplicates: u64,
    local_equal: bool,
    online_equal: bool,
    within_manifest: Option<bool>,
}

pub fn replay(a: ReplayArgs) -> CmdResult {
    let log = read_text(&a.log)?;
    let expected_local = ServerStore::import(&a.local, LinkName::Local)?;
    let expected_online = ServerStore::import(&a.online, LinkName::Online)?;
    let manifest = a.manifest.as_deref().map(load_manifest).transpose()?;
    let local = IngestState::new(ServerStore::new(LinkName::Local));
    let online = IngestState::new(ServerStore::new(LinkName::Online));

    let (inserted, duplicates) = match a.transport {
        Transport::Direct => replay_log(&log, &local, &online)?,
        Transport::Loopback => replay_over_http(&log, &local, &online)?,
    };
    let (local, online) = (local.snapshot(), online.snapshot());
    let within_manifest = manifest.map(|m| {
        [&local, &online].iter().all(|s| {
            s.ids(&m.node_id).last().is_none_or(|&max| max <= m.max_record_id)
        })
    });
    let summary = ReplaySummary {
        requests: inserted + duplicates,
        inserted,
        duplicates,
        local_equal: local == expected_local,
        online_equal: online == expected_online,
        within_manifest,
    };
    if a.json {
        print!("{}", json(&summary));
    } else {
        println!("requests          {}", summary.requests);
        println!("inserted          {}", summary.inserted);
        println!("duplicates        {}", summary.duplicates);
        println!("local matches     {}", summary.local_equal);
        println!("online matches    {}", summary.online_equal);
        if let Some(ok) = summary.within_manifest {
            println!("within manifest   {ok}");
        }
    }
    let ok = summary.local_equal && summary.online_equal && summary.within_manifest != Some(false);
    Ok(if ok { EXIT_OK } else { EXIT_MISMATCH })
}

fn replay_over_http(log: &str, local: &IngestState, online: &IngestState) -> Result<(u64, u64), CliError> {
    let local_server = IngestServer::start(local.clone(), 0)?;
    let online_server = IngestServer::start(online.clone(), 0)?;
    let clients = [
        IngestClient::new(local_server.base_url()),
        IngestClient::new(online_server.base_url()),
    ];
    let (mut inserted, mut duplicates) = (0, 0);
    for (idx, line) in log.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |m: String| CliError::Data(format!("request log line {}: {m}", idx + 1));
        let (link, body) = parse_log_line(line).map_err(bad)?;
        let client = match link {
            LinkName::Local => &clients[0],
            LinkName::Online => &clients[1],
        };
        let reply = client.post_form(body)?;
        match (reply.status, reply.body.as_str()) {
            (200, "inserted") => inserted += 1,
            (200, "duplicate") => duplicates += 1,
            (status, body) => return Err(bad(format!("server replied {status}: {body}"))),
        }
    }
    local_server.shutdown();
    online_server.shutdown();
    Ok((inserted, duplicates))
}

pub fn scenario(name: &str) -> CmdResult {
    let text = bundled_scenario_text(name)
        .ok_or_else(|| CliError::Usage(format!("unknown scenario {name:?} (expected paper or collision)")))?;
    print!("{text}");
    Ok(EXIT_OK)
}
