//! Scenario-driven experiment runner.
//!
//! A run drives one node through its schedule, offers every emitted packet
//! to the local link and then the online link, and inserts what each link
//! delivers into that server's store, either directly or over loopback
//! HTTP. Simulated time is event-driven; nothing sleeps.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{Delivery, Link, LinkName, LinkSpec};
use crate::ingest::{encode_form, IngestClient, IngestError, IngestServer, IngestState};
use crate::model::{PacketKey, RecordId, Timestamp};
use crate::node::{run_node_with, Emission, NodeConfig, NodeError, NodeRunPlan, PersistentCounter, WifiSchedule};
use crate::reconciler::{
    id_merge, reconcile, timestamp_merge_baseline, Manifest, ReconcileError,
};
use crate::store::{ServerStore, StoreError};

const PAPER_SCENARIO: &str = include_str!("../scenarios/paper.toml");
const COLLISION_SCENARIO: &str = include_str!("../scenarios/collision.toml");

pub const TRANSMISSIONS_CSV: &str = "transmissions_hourly.csv";
pub const LOSS_CSV: &str = "loss_hourly.csv";
pub const REDUNDANCY_CSV: &str = "redundancy_comparison.csv";
pub const RECOVERY_CSV: &str = "recovery_hourly.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const LOCAL_JSONL: &str = "local.jsonl";
pub const ONLINE_JSONL: &str = "online.jsonl";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Reconcile(#[from] ReconcileError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("request log line {line}: {message}")]
    Log { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    Direct,
    Loopback,
}

impl std::str::FromStr for Transport {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Transport::Direct),
            "loopback" => Ok(Transport::Loopback),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Seconds; sends happen strictly before this instant.
    pub duration: u64,
    pub seed: u64,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default)]
    pub reboots: Vec<u64>,
    pub node: NodeConfig,
    #[serde(default)]
    pub wifi: WifiSchedule,
    pub local_link: LinkSpec,
    pub online_link: LinkSpec,
}

fn default_name() -> String {
    "scenario".into()
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|message| SimError::Parse {
            path: path.to_owned(),
            message,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.duration == 0 {
            return bad("duration must be > 0".into());
        }
        self.node.validate().map_err(SimError::Config)?;
        self.local_link
            .loss
            .validate()
            .map_err(|e| SimError::Config(format!("local_link: {e}")))?;
        self.online_link
            .loss
            .validate()
            .map_err(|e| SimError::Config(format!("online_link: {e}")))?;
        if let Some(r) = self.reboots.iter().find(|&&r| r >= self.duration) {
            return bad(format!("reboot at {r} is not before duration {}", self.duration));
        }
        if let Some((s, e)) = self.wifi.outages.iter().find(|(s, e)| s >= e) {
            return bad(format!("wifi outage [{s}, {e}) is empty"));
        }
        Ok(())
    }
}

/// The bundled eight-hour replay preset.
pub fn paper_scenario() -> ScenarioConfig {
    ScenarioConfig::from_toml_str(PAPER_SCENARIO).expect("bundled scenario is valid")
}

/// Bundled variant tuned to produce a known number of timestamp collisions.
pub fn collision_scenario() -> ScenarioConfig {
    ScenarioConfig::from_toml_str(COLLISION_SCENARIO).expect("bundled scenario is valid")
}

pub fn bundled_scenario_text(name: &str) -> Option<&'static str> {
    match name {
        "paper" => Some(PAPER_SCENARIO),
        "collision" => Some(COLLISION_SCENARIO),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourRow {
    pub hour: u64,
    pub generated: u64,
    pub delivered_local: u64,
    pub delivered_online: u64,
    pub lost_local: u64,
    pub lost_online: u64,
    pub lost_both: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub generated: u64,
    pub delivered_local: u64,
    pub delivered_online: u64,
    pub lost_local: u64,
    pub lost_online: u64,
    pub lost_both: u64,
    pub hourly: Vec<HourRow>,
    pub manifest: Manifest,
}

impl RunMetrics {
    /// Per-link conservation and hourly-total consistency.
    pub fn check(&self) -> Result<(), String> {
        if self.generated != self.delivered_local + self.lost_local
            || self.generated != self.delivered_online + self.lost_online
        {
            return Err("per-link conservation violated".into());
        }
        let mut sum = HourRow::default();
        for h in &self.hourly {
            sum.generated += h.generated;
            sum.delivered_local += h.delivered_local;
            sum.delivered_online += h.delivered_online;
            sum.lost_local += h.lost_local;
            sum.lost_online += h.lost_online;
            sum.lost_both += h.lost_both;
        }
        let totals = (
            self.generated,
            self.delivered_local,
            self.delivered_online,
            self.lost_local,
            self.lost_online,
            self.lost_both,
        );
        let hourly = (
            sum.generated,
            sum.delivered_local,
            sum.delivered_online,
            sum.lost_local,
            sum.lost_online,
            sum.lost_both,
        );
        if totals != hourly {
            return Err(format!("hourly sums {hourly:?} differ from totals {totals:?}"));
        }
        Ok(())
    }
}

/// One transmission attempt on one link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub link: LinkName,
    pub ordinal: u64,
    pub key: PacketKey,
    pub emitted_at: Timestamp,
    /// `None` when the link dropped the packet.
    pub arrival: Option<Timestamp>,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub metrics: RunMetrics,
    pub local: ServerStore,
    pub online: ServerStore,
    pub emissions: Vec<Emission>,
    pub deliveries: Vec<DeliveryRecord>,
}

impl SimulationRun {
    /// Every request that reached a server, in send order: the link name, a
    /// tab, and the form body.
    pub fn request_log(&self) -> String {
        let mut out = String::new();
        for d in self.deliveries.iter().filter(|d| d.arrival.is_some()) {
            let store = match d.link {
                LinkName::Local => &self.local,
                LinkName::Online => &self.online,
            };
            let p = store
                .get(&d.key.node_id, d.key.record_id)
                .expect("delivered packets are stored");
            let _ = writeln!(out, "{}\t{}", d.link, encode_form(p));
        }
        out
    }
}

enum Sink {
    Direct(ServerStore),
    Loopback {
        server: IngestServer,
        client: IngestClient,
    },
}

impl Sink {
    fn open(transport: Transport, link: LinkName) -> Result<Sink, SimError> {
        Ok(match transport {
            Transport::Direct => Sink::Direct(ServerStore::new(link)),
            Transport::Loopback => {
                let server = IngestServer::start(IngestState::new(ServerStore::new(link)), 0)?;
                let client = IngestClient::new(server.base_url());
                Sink::Loopback { server, client }
            }
        })
    }

    fn deliver(&mut self, e: &Emission) -> Result<(), SimError> {
        match self {
            Sink::Direct(store) => {
                store.insert(e.packet.clone())?;
            }
            Sink::Loopback { client, .. } => {
                client.send(&e.packet)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> ServerStore {
        match self {
            Sink::Direct(store) => store,
            Sink::Loopback { server, .. } => server.shutdown(),
        }
    }
}

/// Runs `scenario` to completion.
pub fn run(scenario: &ScenarioConfig) -> Result<SimulationRun, SimError> {
    run_with_counter(scenario, PersistentCounter::in_memory())
}

/// Like [`run`], with caller-supplied counter storage.
pub fn run_with_counter(
    scenario: &ScenarioConfig,
    counter: PersistentCounter,
) -> Result<SimulationRun, SimError> {
    scenario.validate()?;
    let plan = NodeRunPlan {
        duration: scenario.duration,
        reboots: scenario.reboots.clone(),
        wifi: scenario.wifi.clone(),
        seed: scenario.seed,
    };
    let emissions = run_node_with(&scenario.node, &plan, counter)?;

    let mut links = [
        Link::new(LinkName::Local, scenario.local_link.clone()),
        Link::new(LinkName::Online, scenario.online_link.clone()),
    ];
    let mut sinks = [
        Sink::open(scenario.transport, LinkName::Local)?,
        Sink::open(scenario.transport, LinkName::Online)?,
    ];
    let hours = scenario.duration.div_ceil(3600);
    let mut hourly: Vec<HourRow> = (0..hours)
        .map(|hour| HourRow {
            hour,
            ..HourRow::default()
        })
        .collect();
    let mut deliveries = Vec::with_capacity(emissions.len() * 2);

    for e in &emissions {
        let row = &mut hourly[e.emitted_at.hour() as usize];
        row.generated += 1;
        let mut lost = [false; 2];
        for (i, (link, sink)) in links.iter_mut().zip(sinks.iter_mut()).enumerate() {
            let (ordinal, outcome) = link.send(&e.packet, e.emitted_at);
            let arrival = match outcome {
                Delivery::Delivered { arrival } => {
                    sink.deliver(e)?;
                    Some(arrival)
                }
                Delivery::Dropped => {
                    lost[i] = true;
                    None
                }
            };
            deliveries.push(DeliveryRecord {
                link: link.name(),
                ordinal,
                key: e.packet.key(),
                emitted_at: e.emitted_at,
                arrival,
            });
        }
        match lost {
            [false, false] => {
                row.delivered_local += 1;
                row.delivered_online += 1;
            }
            [true, false] => {
                row.lost_local += 1;
                row.delivered_online += 1;
            }
            [false, true] => {
                row.delivered_local += 1;
                row.lost_online += 1;
            }
            [true, true] => {
                row.lost_local += 1;
                row.lost_online += 1;
                row.lost_both += 1;
            }
        }
    }

    let [local_sink, online_sink] = sinks;
    let local = local_sink.finish();
    let online = online_sink.finish();

    let ids: Vec<RecordId> = emissions.iter().map(|e| e.packet.record_id()).collect();
    let total = |f: fn(&HourRow) -> u64| hourly.iter().map(f).sum::<u64>();
    let metrics = RunMetrics {
        scenario: scenario.name.clone(),
        generated: emissions.len() as u64,
        delivered_local: total(|h| h.delivered_local),
        delivered_online: total(|h| h.delivered_online),
        lost_local: total(|h| h.lost_local),
        lost_online: total(|h| h.lost_online),
        lost_both: total(|h| h.lost_both),
        manifest: Manifest::from_emitted(scenario.node.node_id.clone(), &ids),
        hourly,
    };
    Ok(SimulationRun {
        metrics,
        local,
        online,
        emissions,
        deliveries,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), SimError> {
    fs::write(path, contents).map_err(|source| SimError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes the four figure-data CSVs and returns their paths.
///
/// Columns:
/// - `transmissions_hourly.csv`: hour, generated, received_local, received_online
/// - `loss_hourly.csv`: hour, lost_local, lost_online, lost_both
/// - `redundancy_comparison.csv`: merge_key, merged_rows, duplicates, duplicate_percent
/// - `recovery_hourly.csv`: hour, recovered_to_local, recovered_to_online, unrecoverable
///
/// Recovery rows bin each copied packet by the hour of its own timestamp.
pub fn emit_figures(
    metrics: &RunMetrics,
    local: &ServerStore,
    online: &ServerStore,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(out_dir).map_err(|source| SimError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let mut files = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<(), SimError> {
        let path = out_dir.join(name);
        write_file(&path, &body)?;
        files.push(path);
        Ok(())
    };

    let mut tx = String::from("hour,generated,received_local,received_online\n");
    let mut loss = String::from("hour,lost_local,lost_online,lost_both\n");
    for h in &metrics.hourly {
        let _ = writeln!(tx, "{},{},{},{}", h.hour, h.generated, h.delivered_local, h.delivered_online);
        let _ = writeln!(loss, "{},{},{},{}", h.hour, h.lost_local, h.lost_online, h.lost_both);
    }
    emit(TRANSMISSIONS_CSV, tx)?;
    emit(LOSS_CSV, loss)?;

    let ts = timestamp_merge_baseline(local, online);
    let by_id = id_merge(local, online)?;
    let mut red = String::from("merge_key,merged_rows,duplicates,duplicate_percent\n");
    for (name, m) in [("timestamp", ts), ("record_id", by_id)] {
        let pct = if m.merged_rows == 0 {
            "0.00".to_owned()
        } else {
            crate::reconciler::sync_rate(m.duplicates as u64, m.merged_rows as u64).to_string()
        };
        let _ = writeln!(red, "{name},{},{},{pct}", m.merged_rows, m.duplicates);
    }
    emit(REDUNDANCY_CSV, red)?;

    let rec = reconcile(local, online, Some(&metrics.manifest))?;
    let mut to_local = vec![0u64; metrics.hourly.len()];
    let mut to_online = vec![0u64; metrics.hourly.len()];
    for (node, plan) in &rec.plans {
        for (ids, source, bins) in [
            (&plan.to_local, online, &mut to_local),
            (&plan.to_online, local, &mut to_online),
        ] {
            for &id in ids {
                let hour = source
                    .get(node, id)
                    .map(|p| p.stamped_at().hour() as usize)
                    .unwrap_or(0);
                if hour >= bins.len() {
                    bins.resize(hour + 1, 0);
                }
                bins[hour] += 1;
            }
        }
    }
    let rows = to_local.len().max(to_online.len()).max(metrics.hourly.len());
    let mut recovery = String::from("hour,recovered_to_local,recovered_to_online,unrecoverable\n");
    for hour in 0..rows {
        let _ = writeln!(
            recovery,
            "{hour},{},{},{}",
            to_local.get(hour).copied().unwrap_or(0),
            to_online.get(hour).copied().unwrap_or(0),
            metrics.hourly.get(hour).map(|h| h.lost_both).unwrap_or(0),
        );
    }
    emit(RECOVERY_CSV, recovery)?;
    Ok(files)
}

/// Writes manifest, both stores, metrics and the figure CSVs to `out_dir`.
pub fn write_outputs(run: &SimulationRun, out_dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(out_dir).map_err(|source| SimError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let mut files = Vec::new();
    let manifest = out_dir.join(MANIFEST_JSON);
    write_file(&manifest, &to_json(&run.metrics.manifest))?;
    files.push(manifest);
    let local = out_dir.join(LOCAL_JSONL);
    run.local.export(&local)?;
    files.push(local);
    let online = out_dir.join(ONLINE_JSONL);
    run.online.export(&online)?;
    files.push(online);
    let metrics = out_dir.join(METRICS_JSON);
    write_file(&metrics, &to_json(&run.metrics))?;
    files.push(metrics);
    files.extend(emit_figures(&run.metrics, &run.local, &run.online, out_dir)?);
    Ok(files)
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

/// Splits a request-log line into its link and form body.
pub fn parse_log_line(line: &str) -> Result<(LinkName, &str), String> {
    let (link, body) = line
        .split_once('\t')
        .ok_or_else(|| "expected <link>\\t<form body>".to_owned())?;
    Ok((link.parse()?, body))
}

/// Feeds a request log through the ingest handlers into `local` and
/// `online`, returning how many requests were inserted and how many were
/// acknowledged as duplicates. Any other reply is an error.
pub fn replay_log(
    log: &str,
    local: &IngestState,
    online: &IngestState,
) -> Result<(u64, u64), SimError> {
    let (mut inserted, mut duplicate) = (0, 0);
    for (idx, line) in log.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SimError::Log {
            line: line_no,
            message,
        };
        let (link, body) = parse_log_line(line).map_err(err)?;
        let target = match link {
            LinkName::Local => local,
            LinkName::Online => online,
        };
        let reply = target.handle_ingest(body.as_bytes());
        match (reply.status, reply.body.as_str()) {
            (200, "inserted") => inserted += 1,
            (200, "duplicate") => duplicate += 1,
            (status, body) => return Err(err(format!("server replied {status}: {body}"))),
        }
    }
    Ok((inserted, duplicate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{LatencyModel, LossModel};
    use crate::node::{CounterMode, DelayModel};

    fn lossless(duration: u64) -> ScenarioConfig {
        ScenarioConfig {
            name: "lossless".into(),
            duration,
            seed: 1,
            transport: Transport::Direct,
            reboots: vec![],
            node: NodeConfig::new(10),
            wifi: WifiSchedule::always_up(),
            local_link: LinkSpec::default_local(1),
            online_link: LinkSpec::default_online(2),
        }
    }

    #[test]
    fn lossless_hundred_seconds() {
        let r = run(&lossless(100)).unwrap();
        assert_eq!(r.metrics.generated, 10);
        assert_eq!((r.local.len(), r.online.len()), (10, 10));
        assert_eq!(r.metrics.manifest.max_record_id, RecordId(10));
        assert_eq!(r.metrics.hourly.len(), 1);
        r.metrics.check().unwrap();
    }

    #[test]
    fn lossless_run_has_zero_loss_rows() {
        let dir = tempfile::tempdir().unwrap();
        let r = run(&lossless(7200)).unwrap();
        emit_figures(&r.metrics, &r.local, &r.online, dir.path()).unwrap();
        let loss = fs::read_to_string(dir.path().join(LOSS_CSV)).unwrap();
        assert_eq!(loss, "hour,lost_local,lost_online,lost_both\n0,0,0,0\n1,0,0,0\n");
        let recovery = fs::read_to_string(dir.path().join(RECOVERY_CSV)).unwrap();
        assert!(recovery.lines().skip(1).all(|l| l.ends_with(",0,0,0")));
    }

    #[test]
    fn scenario_validation() {
        let mut s = lossless(100);
        s.duration = 0;
        assert!(matches!(s.validate(), Err(SimError::Config(_))));
        let mut s = lossless(100);
        s.reboots = vec![100];
        assert!(s.validate().is_err());
        let mut s = lossless(100);
        s.node.send_interval = 0;
        assert!(s.validate().is_err());
        let mut s = lossless(100);
        s.online_link.loss = LossModel::Bernoulli { p: 2.0 };
        assert!(s.validate().is_err());
        let mut s = lossless(100);
        s.wifi.outages = vec![(5, 5)];
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut s = lossless(500);
        s.node.response_delay = DelayModel::Cycle { seconds: vec![1, 2] };
        s.node.counter_mode = CounterMode::NaiveReset;
        s.online_link.loss = LossModel::Burst {
            p_enter: 0.1,
            p_exit: 0.5,
            drop_in_burst: 0.9,
        };
        s.local_link.latency = LatencyModel::Fixed { seconds: 1 };
        let text = s.to_toml_string();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), s);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = paper_scenario().to_toml_string().replace("duration = 28800", "duration = 28800\ncolour = 1");
        assert!(ScenarioConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn request_log_replays_to_equal_stores() {
        let mut s = lossless(2000);
        s.online_link.loss = LossModel::Bernoulli { p: 0.2 };
        let r = run(&s).unwrap();
        let log = r.request_log();
        let local = IngestState::new(ServerStore::new(LinkName::Local));
        let online = IngestState::new(ServerStore::new(LinkName::Online));
        let (ins, dup) = replay_log(&log, &local, &online).unwrap();
        assert_eq!((ins as usize, dup), (r.local.len() + r.online.len(), 0));
        assert_eq!(local.snapshot(), r.local);
        assert_eq!(online.snapshot(), r.online);
        let (ins, dup) = replay_log(&log, &local, &online).unwrap();
        assert_eq!(ins, 0);
        assert_eq!(dup as usize, r.local.len() + r.online.len());
        assert_eq!(local.snapshot(), r.local);
    }

    #[test]
    fn replay_log_rejects_bad_lines() {
        let st = || IngestState::new(ServerStore::new(LinkName::Local));
        assert!(matches!(replay_log("nonsense\n", &st(), &st()), Err(SimError::Log { line: 1, .. })));
        assert!(matches!(replay_log("\nmars\tx=1\n", &st(), &st()), Err(SimError::Log { line: 2, .. })));
    }

    #[test]
    fn naive_reset_collision_surfaces_as_store_conflict() {
        let mut s = lossless(400);
        s.node.counter_mode = CounterMode::NaiveReset;
        s.reboots = vec![195];
        let err = run(&s).unwrap_err();
        assert!(matches!(err, SimError::Store(StoreError::Conflict { .. })), "{err}");
    }
}
