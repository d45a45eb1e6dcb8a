//! Sensor-node state machine.
//!
//! A node boots, retries Wi-Fi once per simulated second until the link is
//! up, loads its record counter, and then emits one packet per send slot.
//! In [`CounterMode::Persistent`] the incremented counter is written to
//! durable storage before the packet is released, so a crash between the
//! two steps leaves a gap in the id sequence and never a reused id.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    make_packet, ModelError, NodeId, Packet, RecordId, SensorSample, Tenths, Timestamp,
};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("counter storage {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("counter storage {location} is corrupt: {content:?}")]
    Corrupt { location: String, content: String },
    #[error("counter storage rejected write of {0}")]
    WriteRejected(u64),
    #[error("node is not running (phase {0:?})")]
    NotRunning(Phase),
    #[error("send slot not reached: now {now}, next send at {next}")]
    NotDue { now: Timestamp, next: Timestamp },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Durable storage behind a [`PersistentCounter`].
pub trait CounterBackend: Send {
    /// `None` when nothing has ever been persisted.
    fn load(&mut self) -> Result<Option<u64>, NodeError>;
    fn store(&mut self, value: u64) -> Result<(), NodeError>;
}

/// Counter kept in a one-line text file (`"41\n"`), replaced atomically by
/// writing a sibling temp file and renaming it over the original.
#[derive(Debug, Clone)]
pub struct FileCounter {
    path: PathBuf,
}

impl FileCounter {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileCounter { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn io_err(&self, source: io::Error) -> NodeError {
        NodeError::Io {
            path: self.path.clone(),
            source,
        }
    }
}

impl CounterBackend for FileCounter {
    fn load(&mut self) -> Result<Option<u64>, NodeError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(self.io_err(e)),
        };
        parse_counter(&text)
            .map(Some)
            .ok_or_else(|| NodeError::Corrupt {
                location: self.path.display().to_string(),
                content: text,
            })
    }

    fn store(&mut self, value: u64) -> Result<(), NodeError> {
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let write = || -> io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            writeln!(f, "{value}")?;
            f.sync_all()?;
            fs::rename(&tmp, &self.path)
        };
        write().map_err(|e| self.io_err(e))
    }
}

fn parse_counter(text: &str) -> Option<u64> {
    let line = text.strip_suffix('\n').unwrap_or(text);
    if line.is_empty() || !line.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    line.parse().ok()
}

#[derive(Debug, Default)]
struct MemoryCell {
    value: Option<u64>,
    raw: Option<String>,
    fail_writes: bool,
}

/// In-memory counter storage. Clones share the same cell, so a rebooted node
/// sees what its previous incarnation persisted.
#[derive(Debug, Clone, Default)]
pub struct MemoryCounter {
    cell: Arc<Mutex<MemoryCell>>,
}

impl MemoryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_value(value: u64) -> Self {
        let c = Self::default();
        c.cell.lock().unwrap().value = Some(value);
        c
    }

    /// Storage holding unparseable bytes, as after a torn write.
    pub fn corrupt(raw: &str) -> Self {
        let c = Self::default();
        c.cell.lock().unwrap().raw = Some(raw.to_owned());
        c
    }

    pub fn value(&self) -> Option<u64> {
        self.cell.lock().unwrap().value
    }

    pub fn set_fail_writes(&self, fail: bool) {
        self.cell.lock().unwrap().fail_writes = fail;
    }
}

impl CounterBackend for MemoryCounter {
    fn load(&mut self) -> Result<Option<u64>, NodeError> {
        let cell = self.cell.lock().unwrap();
        match &cell.raw {
            Some(raw) => parse_counter(raw).map(Some).ok_or_else(|| NodeError::Corrupt {
                location: "memory".into(),
                content: raw.clone(),
            }),
            None => Ok(cell.value),
        }
    }

    fn store(&mut self, value: u64) -> Result<(), NodeError> {
        let mut cell = self.cell.lock().unwrap();
        if cell.fail_writes {
            return Err(NodeError::WriteRejected(value));
        }
        cell.raw = None;
        cell.value = Some(value);
        Ok(())
    }
}

/// The emulated EEPROM record counter.
pub struct PersistentCounter {
    backend: Box<dyn CounterBackend>,
    cached: RecordId,
}

impl PersistentCounter {
    pub fn new(backend: impl CounterBackend + 'static) -> Self {
        PersistentCounter {
            backend: Box::new(backend),
            cached: RecordId::ZERO,
        }
    }

    pub fn in_memory() -> Self {
        Self::new(MemoryCounter::new())
    }

    pub fn cached(&self) -> RecordId {
        self.cached
    }

    /// Reloads the cached value from storage; 0 on first boot.
    pub fn load(&mut self) -> Result<RecordId, NodeError> {
        self.cached = RecordId(self.backend.load()?.unwrap_or(0));
        Ok(self.cached)
    }

    /// Persists `cached + 1` and only then adopts it.
    fn advance_durable(&mut self) -> Result<RecordId, NodeError> {
        let next = self.cached.next();
        self.backend.store(next.get())?;
        self.cached = next;
        Ok(next)
    }

    fn advance_volatile(&mut self) -> RecordId {
        self.cached = self.cached.next();
        self.cached
    }

    fn reset_volatile(&mut self) {
        self.cached = RecordId::ZERO;
    }
}

impl std::fmt::Debug for PersistentCounter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PersistentCounter")
            .field("cached", &self.cached)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterMode {
    /// Counter survives reboot through durable storage.
    #[default]
    Persistent,
    /// Counter restarts at zero after every boot.
    NaiveReset,
}

impl std::str::FromStr for CounterMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "persistent" => Ok(CounterMode::Persistent),
            "naive-reset" => Ok(CounterMode::NaiveReset),
            other => Err(format!("unknown counter mode {other:?}")),
        }
    }
}

/// Extra seconds a node waits after each send, on top of the nominal
/// interval, modelling slow server responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    #[default]
    None,
    Fixed { seconds: u64 },
    /// Repeats the listed delays.
    Cycle { seconds: Vec<u64> },
    /// Spreads `extra_seconds` as evenly as possible over every
    /// `over_sends` sends: after k sends the total delay is
    /// `floor(k * extra_seconds / over_sends)`.
    Spread { extra_seconds: u64, over_sends: u64 },
    /// Seeded uniform integer delay in `0..=max`.
    Uniform { max: u64 },
}

impl DelayModel {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            DelayModel::Cycle { seconds } if seconds.is_empty() => {
                Err("cycle delay needs at least one entry".into())
            }
            DelayModel::Spread { over_sends: 0, .. } => Err("spread delay needs over_sends > 0".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug)]
struct DelaySequence {
    model: DelayModel,
    rng: ChaCha8Rng,
}

impl DelaySequence {
    fn new(model: DelayModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_DELAY);
        DelaySequence { model, rng }
    }

    /// Delay after the `k`-th send (0-based).
    fn draw(&mut self, k: u64) -> u64 {
        match &self.model {
            DelayModel::None => 0,
            DelayModel::Fixed { seconds } => *seconds,
            DelayModel::Cycle { seconds } => seconds[(k % seconds.len() as u64) as usize],
            DelayModel::Spread {
                extra_seconds,
                over_sends,
            } => {
                let total = |n: u64| (n as u128 * *extra_seconds as u128 / *over_sends as u128) as u64;
                total(k + 1) - total(k)
            }
            DelayModel::Uniform { max } => self.rng.random_range(0..=*max),
        }
    }
}

const STREAM_DELAY: u64 = 1;
const STREAM_SAMPLES: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default)]
    pub node_id: NodeId,
    /// Nominal seconds between sends.
    pub send_interval: u64,
    #[serde(default)]
    pub response_delay: DelayModel,
    #[serde(default)]
    pub counter_mode: CounterMode,
}

impl NodeConfig {
    pub fn new(send_interval: u64) -> Self {
        NodeConfig {
            node_id: NodeId::default(),
            send_interval,
            response_delay: DelayModel::None,
            counter_mode: CounterMode::Persistent,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.send_interval == 0 {
            return Err("send_interval must be > 0".into());
        }
        self.response_delay.validate()
    }
}

/// Source of sensor readings.
pub trait SampleSource {
    fn sample(&mut self, at: Timestamp) -> SensorSample;
}

/// Seeded bounded random walk around 25.0 °C / 50.0 %RH.
#[derive(Debug, Clone)]
pub struct RandomWalk {
    rng: ChaCha8Rng,
    temperature: i32,
    humidity: i32,
}

impl RandomWalk {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_SAMPLES);
        RandomWalk {
            rng,
            temperature: 250,
            humidity: 500,
        }
    }
}

impl SampleSource for RandomWalk {
    fn sample(&mut self, _at: Timestamp) -> SensorSample {
        self.temperature = (self.temperature + self.rng.random_range(-3..=3)).clamp(150, 400);
        self.humidity = (self.humidity + self.rng.random_range(-5..=5)).clamp(200, 950);
        SensorSample::new(Tenths(self.temperature), Tenths(self.humidity))
            .expect("random walk is clamped inside sensor range")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Booting,
    ConnectingWifi,
    Running,
}

/// Wi-Fi availability as a list of half-open outage windows `[start, end)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WifiSchedule {
    #[serde(default)]
    pub outages: Vec<(u64, u64)>,
}

impl WifiSchedule {
    pub fn always_up() -> Self {
        Self::default()
    }

    pub fn is_up(&self, t: Timestamp) -> bool {
        !self.outages.iter().any(|&(s, e)| s <= t.0 && t.0 < e)
    }
}

#[derive(Debug)]
pub struct NodeState {
    config: NodeConfig,
    phase: Phase,
    clock: Timestamp,
    next_send_at: Timestamp,
    counter: PersistentCounter,
    delays: DelaySequence,
    sends: u64,
}

impl NodeState {
    /// Powers the node on at `at` and loads the record counter.
    pub fn boot(
        config: &NodeConfig,
        mut counter: PersistentCounter,
        seed: u64,
        at: Timestamp,
    ) -> Result<NodeState, NodeError> {
        let mut state = NodeState {
            config: config.clone(),
            phase: Phase::Booting,
            clock: at,
            next_send_at: at,
            counter: {
                load_for_mode(&mut counter, config.counter_mode)?;
                counter
            },
            delays: DelaySequence::new(config.response_delay.clone(), seed),
            sends: 0,
        };
        state.phase = Phase::ConnectingWifi;
        Ok(state)
    }

    /// Power-cycles the node at `at`, keeping its storage and delay schedule.
    pub fn reboot(mut self, at: Timestamp) -> Result<NodeState, NodeError> {
        load_for_mode(&mut self.counter, self.config.counter_mode)?;
        self.phase = Phase::ConnectingWifi;
        self.clock = at;
        self.next_send_at = at;
        Ok(self)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn counter(&self) -> RecordId {
        self.counter.cached()
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn next_send_at(&self) -> Timestamp {
        self.next_send_at
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    /// Tries once per simulated second, starting at the current clock, until
    /// `is_up` reports the link up or `deadline` (exclusive) is reached.
    /// Returns the number of failed attempts when a connection was made.
    pub fn connect_wifi(
        &mut self,
        is_up: impl Fn(Timestamp) -> bool,
        deadline: Timestamp,
    ) -> Option<u64> {
        if self.phase == Phase::Running {
            return Some(0);
        }
        let start = self.clock;
        let mut t = start;
        while t < deadline {
            if is_up(t) {
                self.phase = Phase::Running;
                self.clock = t;
                self.next_send_at = t;
                return Some(t.0 - start.0);
            }
            t = t.plus(1);
        }
        self.clock = deadline;
        None
    }

    /// Emits the packet for the send slot at `now`.
    ///
    /// In persistent mode the new id is written to storage before the packet
    /// is returned; if that write fails no packet is produced and the cached
    /// counter is left untouched.
    pub fn next_packet(
        &mut self,
        samples: &mut dyn SampleSource,
        now: Timestamp,
    ) -> Result<Packet, NodeError> {
        if self.phase != Phase::Running {
            return Err(NodeError::NotRunning(self.phase));
        }
        if now < self.next_send_at {
            return Err(NodeError::NotDue {
                now,
                next: self.next_send_at,
            });
        }
        let sample = samples.sample(now);
        let id = match self.config.counter_mode {
            CounterMode::Persistent => self.counter.advance_durable()?,
            CounterMode::NaiveReset => self.counter.advance_volatile(),
        };
        let packet = make_packet(self.config.node_id.clone(), id, sample, now)?;
        let delay = self.delays.draw(self.sends);
        self.sends += 1;
        self.clock = now;
        self.next_send_at = now.plus(self.config.send_interval + delay);
        Ok(packet)
    }
}

fn load_for_mode(counter: &mut PersistentCounter, mode: CounterMode) -> Result<(), NodeError> {
    match mode {
        CounterMode::Persistent => {
            counter.load()?;
        }
        CounterMode::NaiveReset => counter.reset_volatile(),
    }
    Ok(())
}

/// One packet together with the simulated instant it left the node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub packet: Packet,
    pub emitted_at: Timestamp,
}

/// Everything besides the node configuration that shapes a node run.
#[derive(Debug, Clone, Default)]
pub struct NodeRunPlan {
    /// Emissions happen strictly before this instant.
    pub duration: u64,
    /// Reboot instants. A reboot at `r` happens after any send at `r`.
    pub reboots: Vec<u64>,
    pub wifi: WifiSchedule,
    pub seed: u64,
}

/// Runs a node with always-up Wi-Fi, no reboots and in-memory storage.
pub fn run_node(config: &NodeConfig, duration: u64, seed: u64) -> Result<Vec<Emission>, NodeError> {
    let plan = NodeRunPlan {
        duration,
        seed,
        ..NodeRunPlan::default()
    };
    run_node_with(config, &plan, PersistentCounter::in_memory())
}

/// Drives a node through `plan`, returning every emission in order.
pub fn run_node_with(
    config: &NodeConfig,
    plan: &NodeRunPlan,
    counter: PersistentCounter,
) -> Result<Vec<Emission>, NodeError> {
    let duration = Timestamp(plan.duration);
    let mut reboots: Vec<u64> = plan.reboots.clone();
    reboots.sort_unstable();
    let mut reboots = reboots.into_iter().filter(|&r| r < plan.duration).peekable();

    let mut samples = RandomWalk::new(plan.seed);
    let mut state = NodeState::boot(config, counter, plan.seed, Timestamp(0))?;
    let mut out = Vec::new();
    loop {
        let reboot_at = reboots.peek().copied().map(Timestamp);
        // Sends may happen at the reboot instant itself, never after it.
        let segment_end = match reboot_at {
            Some(r) => r.plus(1).min(duration),
            None => duration,
        };
        if state.connect_wifi(|t| plan.wifi.is_up(t), segment_end).is_some() {
            while state.next_send_at() < segment_end {
                let now = state.next_send_at();
                let packet = state.next_packet(&mut samples, now)?;
                out.push(Emission {
                    packet,
                    emitted_at: now,
                });
            }
        }
        match reboot_at {
            Some(r) => {
                reboots.next();
                state = state.reboot(r)?;
            }
            None => break,
        }
    }
    Ok(out)
}
