//! Record-id reconciliation of the local and online stores.
//!
//! The two stores are compared per node by their record-id sets. Ids held
//! by only one side are copied verbatim to the other; ids in neither store
//! but at or below the reference maximum are unrecoverable holes. The
//! reference maximum comes from the generator manifest when one is supplied,
//! otherwise from the largest id either store holds, in which case the hole
//! count is only a lower bound.
//!
//! The module also measures redundancy under two merge policies: merging on
//! the second-resolution timestamp (every row that shares its timestamp
//! with another row counts as redundant) and merging on packet identity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{NodeId, Packet, PacketKey, RecordId, Timestamp};
use crate::store::{ServerStore, StoreError};

/// How redundant rows are counted under the timestamp merge.
pub const TIMESTAMP_DUPLICATE_RULE: &str =
    "rows are merged on timestamp alone; every merged row that shares its timestamp with at least one other row counts as redundant";

#[derive(Debug, Error)]
pub enum ReconcileError {
    #[error("plan expects {key} in the {source_store} store but it is absent")]
    MissingSource {
        key: PacketKey,
        source_store: &'static str,
    },
    #[error("{key} exceeds the manifest maximum {max}")]
    BeyondManifest { key: PacketKey, max: RecordId },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncPlan {
    /// Held locally, missing online.
    pub to_online: BTreeSet<RecordId>,
    /// Held online, missing locally.
    pub to_local: BTreeSet<RecordId>,
    /// In neither store, at or below the reference maximum.
    pub unrecoverable: BTreeSet<RecordId>,
}

impl SyncPlan {
    pub fn is_empty(&self) -> bool {
        self.to_online.is_empty() && self.to_local.is_empty() && self.unrecoverable.is_empty()
    }

    /// Number of records `apply` will copy.
    pub fn copies(&self) -> usize {
        self.to_online.len() + self.to_local.len()
    }
}

pub fn diff(
    local_ids: &BTreeSet<RecordId>,
    online_ids: &BTreeSet<RecordId>,
    reference_max: Option<RecordId>,
) -> SyncPlan {
    let to_online = local_ids.difference(online_ids).copied().collect();
    let to_local = online_ids.difference(local_ids).copied().collect();
    let max = reference_max.or_else(|| {
        let a = local_ids.last().copied();
        let b = online_ids.last().copied();
        a.max(b)
    });
    let unrecoverable = match max {
        Some(m) => (1..=m.get())
            .map(RecordId)
            .filter(|id| !local_ids.contains(id) && !online_ids.contains(id))
            .collect(),
        None => BTreeSet::new(),
    };
    SyncPlan {
        to_online,
        to_local,
        unrecoverable,
    }
}

/// Copies the planned records between the stores for `node_id`.
///
/// Every planned source is checked before either store is touched, so a
/// stale plan fails without partial effects.
pub fn apply(
    node_id: &NodeId,
    plan: &SyncPlan,
    local: &mut ServerStore,
    online: &mut ServerStore,
) -> Result<(), ReconcileError> {
    let collect = |ids: &BTreeSet<RecordId>, from: &ServerStore, name: &'static str| {
        ids.iter()
            .map(|&id| {
                from.get(node_id, id).cloned().ok_or_else(|| ReconcileError::MissingSource {
                    key: PacketKey {
                        node_id: node_id.clone(),
                        record_id: id,
                    },
                    source_store: name,
                })
            })
            .collect::<Result<Vec<Packet>, _>>()
    };
    let for_online = collect(&plan.to_online, local, "local")?;
    let for_local = collect(&plan.to_local, online, "online")?;
    for p in for_online {
        online.insert(p)?;
    }
    for p in for_local {
        local.insert(p)?;
    }
    Ok(())
}

/// A percentage kept as an integer number of hundredths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Percent {
    hundredths: u64,
}

impl Percent {
    pub fn from_hundredths(hundredths: u64) -> Self {
        Percent { hundredths }
    }

    pub fn hundredths(self) -> u64 {
        self.hundredths
    }

    pub fn as_f64(self) -> f64 {
        self.hundredths as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.hundredths / 100, self.hundredths % 100)
    }
}

impl Serialize for Percent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v.is_nan() || v < 0.0 {
            return Err(serde::de::Error::custom("percentage must be non-negative"));
        }
        Ok(Percent::from_hundredths((v * 100.0).round() as u64))
    }
}

/// `100 * synchronized / generated`, rounded half-up to two decimals.
pub fn sync_rate(synchronized: u64, generated: u64) -> Percent {
    assert!(generated >= 1, "sync rate needs at least one generated packet");
    let num = synchronized as u128 * 10_000 * 2 + generated as u128;
    Percent::from_hundredths((num / (2 * generated as u128)) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeCount {
    pub merged_rows: usize,
    pub duplicates: usize,
}

/// Legacy merge keyed on timestamp alone: all rows from both stores are
/// kept, and every row sharing its timestamp with another row is counted.
pub fn timestamp_merge_baseline(local: &ServerStore, online: &ServerStore) -> MergeCount {
    let mut per_second: BTreeMap<Timestamp, usize> = BTreeMap::new();
    for p in local.packets().chain(online.packets()) {
        *per_second.entry(p.stamped_at()).or_default() += 1;
    }
    MergeCount {
        merged_rows: local.len() + online.len(),
        duplicates: per_second.values().filter(|&&n| n >= 2).sum(),
    }
}

/// Merge keyed on packet identity. Fails on an identity collision with
/// differing payloads.
pub fn id_merge(local: &ServerStore, online: &ServerStore) -> Result<MergeCount, StoreError> {
    let mut merged: BTreeMap<PacketKey, &Packet> = BTreeMap::new();
    for p in local.packets().chain(online.packets()) {
        match merged.get(&p.key()) {
            Some(existing) if *existing != p => {
                return Err(StoreError::Conflict {
                    key: p.key(),
                    existing: Box::new((*existing).clone()),
                    incoming: Box::new(p.clone()),
                })
            }
            Some(_) => {}
            None => {
                merged.insert(p.key(), p);
            }
        }
    }
    let rows: Vec<&Packet> = merged.into_values().collect();
    let mut per_key: HashMap<PacketKey, usize> = HashMap::new();
    for p in &rows {
        *per_key.entry(p.key()).or_default() += 1;
    }
    let duplicates = per_key.values().filter(|&&n| n >= 2).sum();
    assert_eq!(duplicates, 0, "identity merge produced a repeated key");
    Ok(MergeCount {
        merged_rows: rows.len(),
        duplicates,
    })
}

/// The generator's record of what a node emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub node_id: NodeId,
    pub generated: u64,
    pub max_record_id: RecordId,
    /// Hex SHA-256 over the emitted ids, one decimal id per line.
    pub ids_digest: String,
}

impl Manifest {
    pub fn from_emitted(node_id: NodeId, ids: &[RecordId]) -> Self {
        Manifest {
            node_id,
            generated: ids.len() as u64,
            max_record_id: ids.iter().copied().max().unwrap_or(RecordId::ZERO),
            ids_digest: ids_digest(ids),
        }
    }
}

pub fn ids_digest(ids: &[RecordId]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(format!("{id}\n").as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Holes measured against the generator manifest.
    Manifest,
    /// No manifest: holes measured up to the largest stored id only.
    LowerBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub reference: ReferenceSource,
    pub generated: u64,
    pub received_local: u64,
    pub received_online: u64,
    pub lost_local: u64,
    pub lost_online: u64,
    pub lost_both: u64,
    pub to_online: u64,
    pub to_local: u64,
    pub unrecoverable: u64,
    pub unrecoverable_ids: Vec<PacketKey>,
    pub synchronized: u64,
    pub sync_rate_percent: Percent,
    pub redundant_under_timestamp_merge: u64,
    pub redundant_under_id_merge: u64,
    pub timestamp_duplicate_rule: String,
}

#[derive(Debug, Clone)]
pub struct Reconciliation {
    pub plans: BTreeMap<NodeId, SyncPlan>,
    pub report: SyncReport,
    pub local: ServerStore,
    pub online: ServerStore,
}

/// Diffs, applies and reports on a pair of stores. The inputs are left
/// untouched; the synchronized stores are returned.
pub fn reconcile(
    local: &ServerStore,
    online: &ServerStore,
    manifest: Option<&Manifest>,
) -> Result<Reconciliation, ReconcileError> {
    let timestamp = timestamp_merge_baseline(local, online);
    let by_id = id_merge(local, online)?;

    let mut nodes: BTreeSet<NodeId> = local.node_ids();
    nodes.extend(online.node_ids());
    if let Some(m) = manifest {
        nodes.insert(m.node_id.clone());
    }

    let mut synced_local = local.clone();
    let mut synced_online = online.clone();
    let mut plans = BTreeMap::new();
    let mut generated = 0u64;
    let mut lost_local = 0u64;
    let mut lost_online = 0u64;
    let mut unrecoverable_ids = Vec::new();
    let mut all_from_manifest = true;

    for node in nodes {
        let local_ids = local.ids(&node);
        let online_ids = online.ids(&node);
        let reference = manifest.filter(|m| m.node_id == node).map(|m| m.max_record_id);
        if let Some(max) = reference {
            let over = local_ids.last().max(online_ids.last()).copied().filter(|&id| id > max);
            if let Some(id) = over {
                return Err(ReconcileError::BeyondManifest {
                    key: PacketKey {
                        node_id: node,
                        record_id: id,
                    },
                    max,
                });
            }
        } else {
            all_from_manifest = false;
        }
        let plan = diff(&local_ids, &online_ids, reference);
        let max = reference
            .or_else(|| local_ids.last().max(online_ids.last()).copied())
            .unwrap_or(RecordId::ZERO);
        let node_generated = match manifest.filter(|m| m.node_id == node) {
            Some(m) => m.generated,
            None => max.get(),
        };
        generated += node_generated;
        lost_local += max.get() - local_ids.len() as u64;
        lost_online += max.get() - online_ids.len() as u64;
        unrecoverable_ids.extend(plan.unrecoverable.iter().map(|&record_id| PacketKey {
            node_id: node.clone(),
            record_id,
        }));
        apply(&node, &plan, &mut synced_local, &mut synced_online)?;
        plans.insert(node, plan);
    }

    debug_assert_eq!(synced_local.len(), synced_online.len());
    let synchronized = synced_local.len() as u64;
    let report = SyncReport {
        reference: if all_from_manifest {
            ReferenceSource::Manifest
        } else {
            ReferenceSource::LowerBound
        },
        generated,
        received_local: local.len() as u64,
        received_online: online.len() as u64,
        lost_local,
        lost_online,
        lost_both: unrecoverable_ids.len() as u64,
        to_online: plans.values().map(|p| p.to_online.len() as u64).sum(),
        to_local: plans.values().map(|p| p.to_local.len() as u64).sum(),
        unrecoverable: unrecoverable_ids.len() as u64,
        unrecoverable_ids,
        synchronized,
        sync_rate_percent: if generated == 0 {
            Percent::from_hundredths(10_000)
        } else {
            sync_rate(synchronized, generated)
        },
        redundant_under_timestamp_merge: timestamp.duplicates as u64,
        redundant_under_id_merge: by_id.duplicates as u64,
        timestamp_duplicate_rule: TIMESTAMP_DUPLICATE_RULE.to_owned(),
    };
    Ok(Reconciliation {
        plans,
        report,
        local: synced_local,
        online: synced_online,
    })
}
