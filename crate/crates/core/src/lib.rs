//! Record-id based synchronization of sensor telemetry written to two
//! servers, with a deterministic simulator of the node, its lossy links
//! and the server stores.

pub mod channel;
pub mod ingest;
pub mod model;
pub mod node;
pub mod reconciler;
pub mod simulator;
pub mod store;

pub use channel::{Delivery, LatencyModel, Link, LinkName, LinkSpec, LossModel};
pub use model::{
    make_packet, packet_identity, ModelError, NodeId, Packet, PacketKey, RecordId, SensorSample,
    Tenths, Timestamp,
};
pub use node::{CounterMode, DelayModel, NodeConfig, NodeError, NodeState, PersistentCounter};
pub use reconciler::{
    diff, id_merge, reconcile, sync_rate, timestamp_merge_baseline, Manifest, SyncPlan, SyncReport,
};
pub use store::{InsertOutcome, ServerStore, StoreError};
pub use simulator::{
    collision_scenario, emit_figures, paper_scenario, run, RunMetrics, ScenarioConfig, SimError,
    SimulationRun, Transport,
};
