//! Seeded lossy links between a node and its two servers.
//!
//! Drop and latency decisions for transmission `k` are drawn from a ChaCha
//! stream selected by `k` under the link's own seed, so a decision depends
//! only on `(model, seed, ordinal)` plus, for the burst model, the state
//! reached on the previous ordinal.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Packet, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkName {
    Local,
    Online,
}

impl LinkName {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkName::Local => "local",
            LinkName::Online => "online",
        }
    }
}

impl fmt::Display for LinkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LinkName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(LinkName::Local),
            "online" => Ok(LinkName::Online),
            other => Err(format!("unknown link {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossModel {
    Bernoulli { p: f64 },
    /// Drops exactly the listed 1-based transmission ordinals.
    Schedule { dropped: BTreeSet<u64> },
    /// Two-state Gilbert-Elliott chain.
    Burst {
        p_enter: f64,
        p_exit: f64,
        drop_in_burst: f64,
    },
}

impl LossModel {
    pub fn lossless() -> Self {
        LossModel::Schedule {
            dropped: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{name} = {p} is not a probability"))
            }
        };
        match self {
            LossModel::Bernoulli { p } => prob("p", *p),
            LossModel::Schedule { dropped } => {
                if dropped.contains(&0) {
                    Err("schedule ordinals are 1-based".into())
                } else {
                    Ok(())
                }
            }
            LossModel::Burst {
                p_enter,
                p_exit,
                drop_in_burst,
            } => {
                prob("p_enter", *p_enter)?;
                prob("p_exit", *p_exit)?;
                prob("drop_in_burst", *drop_in_burst)
            }
        }
    }
}

impl Default for LossModel {
    fn default() -> Self {
        LossModel::lossless()
    }
}

/// Seconds between send and arrival.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencyModel {
    Fixed { seconds: u64 },
    /// Integer seconds in `0..=max`.
    Uniform { max: u64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Fixed { seconds: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    #[serde(default)]
    pub loss: LossModel,
    #[serde(default)]
    pub latency: LatencyModel,
    pub seed: u64,
}

impl LinkSpec {
    pub fn default_local(seed: u64) -> Self {
        LinkSpec {
            loss: LossModel::lossless(),
            latency: LatencyModel::Fixed { seconds: 0 },
            seed,
        }
    }

    pub fn default_online(seed: u64) -> Self {
        LinkSpec {
            loss: LossModel::lossless(),
            latency: LatencyModel::Uniform { max: 2 },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered { arrival: Timestamp },
    Dropped,
}

impl Delivery {
    pub fn is_delivered(self) -> bool {
        matches!(self, Delivery::Delivered { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Link {
    name: LinkName,
    spec: LinkSpec,
    in_burst: bool,
    sent: u64,
}

impl Link {
    pub fn new(name: LinkName, spec: LinkSpec) -> Self {
        Link {
            name,
            spec,
            in_burst: false,
            sent: 0,
        }
    }

    pub fn name(&self) -> LinkName {
        self.name
    }

    pub fn spec(&self) -> &LinkSpec {
        &self.spec
    }

    /// Number of transmissions attempted so far.
    pub fn sent(&self) -> u64 {
        self.sent
    }

    fn stream(&self, ordinal: u64, lane: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(ordinal.wrapping_mul(2).wrapping_add(lane));
        rng
    }

    /// Decides the fate of transmission number `ordinal` (1-based), sent at
    /// `sent_at`.
    pub fn transmit(&mut self, ordinal: u64, _packet: &Packet, sent_at: Timestamp) -> Delivery {
        self.sent = self.sent.max(ordinal);
        let dropped = match &self.spec.loss {
            LossModel::Schedule { dropped } => dropped.contains(&ordinal),
            LossModel::Bernoulli { p } => self.stream(ordinal, 0).random_bool(*p),
            LossModel::Burst {
                p_enter,
                p_exit,
                drop_in_burst,
            } => {
                let mut rng = self.stream(ordinal, 0);
                let flip = if self.in_burst { *p_exit } else { *p_enter };
                if rng.random_bool(flip) {
                    self.in_burst = !self.in_burst;
                }
                self.in_burst && rng.random_bool(*drop_in_burst)
            }
        };
        if dropped {
            return Delivery::Dropped;
        }
        let latency = match self.spec.latency {
            LatencyModel::Fixed { seconds } => seconds,
            LatencyModel::Uniform { max } => self.stream(ordinal, 1).random_range(0..=max),
        };
        Delivery::Delivered {
            arrival: sent_at.plus(latency),
        }
    }

    /// Transmits with the next ordinal.
    pub fn send(&mut self, packet: &Packet, sent_at: Timestamp) -> (u64, Delivery) {
        let ordinal = self.sent + 1;
        (ordinal, self.transmit(ordinal, packet, sent_at))
    }
}
