//! Packet, identifier and timestamp vocabulary shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node id used when a scenario does not name one.
pub const DEFAULT_NODE_ID: &str = "n1";

const NODE_ID_MAX_LEN: usize = 32;

pub const TEMPERATURE_MIN: Tenths = Tenths(-400);
pub const TEMPERATURE_MAX: Tenths = Tenths(800);
pub const HUMIDITY_MIN: Tenths = Tenths(0);
pub const HUMIDITY_MAX: Tenths = Tenths(1000);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{field} {value} is outside [{min}, {max}]")]
    Range {
        field: &'static str,
        value: Tenths,
        min: Tenths,
        max: Tenths,
    },
    #[error("record id 0 is reserved and cannot be transmitted")]
    ReservedId,
    #[error("invalid node id {0:?}")]
    NodeId(String),
    #[error("invalid decimal {0:?}: expected at most one fractional digit")]
    Decimal(String),
}

/// Identifier of a sensor node. Short ASCII: letters, digits, `-`, `_`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        let ok = !id.is_empty()
            && id.len() <= NODE_ID_MAX_LEN
            && id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
        if ok {
            Ok(NodeId(id))
        } else {
            Err(ModelError::NodeId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for NodeId {
    fn default() -> Self {
        NodeId(DEFAULT_NODE_ID.to_owned())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for NodeId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        NodeId::new(s)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.0
    }
}

impl FromStr for NodeId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

/// Node-assigned sequence number. Zero means "counter never advanced" and is
/// never carried by a transmitted packet.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RecordId(pub u64);

impl RecordId {
    pub const ZERO: RecordId = RecordId(0);

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn next(self) -> RecordId {
        RecordId(self.0 + 1)
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Whole seconds since the scenario epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn seconds(self) -> u64 {
        self.0
    }

    pub fn plus(self, seconds: u64) -> Timestamp {
        Timestamp(self.0 + seconds)
    }

    /// Zero-based hour of the run this instant falls in.
    pub fn hour(self) -> u64 {
        self.0 / 3600
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A decimal with exactly one fractional digit, stored as an integer count of
/// tenths. Displays as `25.0`, `-3.5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tenths(pub i32);

impl Tenths {
    /// Converts a float that must already sit on the 0.1 grid.
    pub fn from_f64(v: f64) -> Result<Tenths, ModelError> {
        let scaled = v * 10.0;
        let rounded = scaled.round();
        if !v.is_finite() || (scaled - rounded).abs() > 1e-6 || rounded.abs() > i32::MAX as f64 {
            return Err(ModelError::Decimal(v.to_string()));
        }
        Ok(Tenths(rounded as i32))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 10.0
    }
}

impl FromStr for Tenths {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::Decimal(s.to_owned());
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int.is_empty()
            || frac.len() > 1
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || (body.contains('.') && frac.is_empty())
        {
            return Err(bad());
        }
        let whole: i32 = int.parse().map_err(|_| bad())?;
        let tenth: i32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let magnitude = whole
            .checked_mul(10)
            .and_then(|w| w.checked_add(tenth))
            .ok_or_else(bad)?;
        Ok(Tenths(if neg { -magnitude } else { magnitude }))
    }
}

impl fmt::Display for Tenths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{}", abs / 10, abs % 10)
    }
}

impl Serialize for Tenths {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.to_f64())
    }
}

impl<'de> Deserialize<'de> for Tenths {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Tenths::from_f64(v).map_err(serde::de::Error::custom)
    }
}

/// One DHT22 reading at the sensor's native 0.1 resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorSample {
    temperature: Tenths,
    humidity: Tenths,
}

impl SensorSample {
    pub fn new(temperature: Tenths, humidity: Tenths) -> Result<Self, ModelError> {
        check_range("temperature", temperature, TEMPERATURE_MIN, TEMPERATURE_MAX)?;
        check_range("humidity", humidity, HUMIDITY_MIN, HUMIDITY_MAX)?;
        Ok(SensorSample {
            temperature,
            humidity,
        })
    }

    /// Convenience for literals such as `SensorSample::from_f64(25.0, 50.0)`.
    pub fn from_f64(temperature: f64, humidity: f64) -> Result<Self, ModelError> {
        SensorSample::new(Tenths::from_f64(temperature)?, Tenths::from_f64(humidity)?)
    }

    pub fn temperature(&self) -> Tenths {
        self.temperature
    }

    pub fn humidity(&self) -> Tenths {
        self.humidity
    }
}

fn check_range(field: &'static str, value: Tenths, min: Tenths, max: Tenths) -> Result<(), ModelError> {
    if value < min || value > max {
        return Err(ModelError::Range {
            field,
            value,
            min,
            max,
        });
    }
    Ok(())
}

/// Dedup key of a packet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PacketKey {
    pub node_id: NodeId,
    pub record_id: RecordId,
}

impl fmt::Display for PacketKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.node_id, self.record_id)
    }
}

/// A validated sensor reading carrying its node-assigned record id.
///
/// Fields are private so a packet can only be obtained through
/// [`make_packet`] (or the store's validated import path).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Packet {
    node_id: NodeId,
    record_id: RecordId,
    sample: SensorSample,
    stamped_at: Timestamp,
}

pub fn make_packet(
    node_id: NodeId,
    record_id: RecordId,
    sample: SensorSample,
    stamped_at: Timestamp,
) -> Result<Packet, ModelError> {
    if record_id == RecordId::ZERO {
        return Err(ModelError::ReservedId);
    }
    Ok(Packet {
        node_id,
        record_id,
        sample,
        stamped_at,
    })
}

/// Identity of a packet. Ignores sample and timestamp.
pub fn packet_identity(p: &Packet) -> PacketKey {
    p.key()
}

impl Packet {
    pub fn node_id(&self) -> &NodeId {
        &self.node_id
    }

    pub fn record_id(&self) -> RecordId {
        self.record_id
    }

    pub fn sample(&self) -> SensorSample {
        self.sample
    }

    pub fn stamped_at(&self) -> Timestamp {
        self.stamped_at
    }

    pub fn key(&self) -> PacketKey {
        PacketKey {
            node_id: self.node_id.clone(),
            record_id: self.record_id,
        }
    }

    /// Field-order-fixed row used by the JSONL and CSV formats.
    pub fn to_row(&self) -> PacketRow {
        PacketRow {
            node_id: self.node_id.clone(),
            record_id: self.record_id.0,
            temperature: self.sample.temperature,
            humidity: self.sample.humidity,
            stamped_at: self.stamped_at.0,
        }
    }
}

/// Flat serialized form of a [`Packet`]. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketRow {
    pub node_id: NodeId,
    pub record_id: u64,
    pub temperature: Tenths,
    pub humidity: Tenths,
    pub stamped_at: u64,
}

impl TryFrom<PacketRow> for Packet {
    type Error = ModelError;

    fn try_from(row: PacketRow) -> Result<Self, Self::Error> {
        let sample = SensorSample::new(row.temperature, row.humidity)?;
        make_packet(
            row.node_id,
            RecordId(row.record_id),
            sample,
            Timestamp(row.stamped_at),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n1() -> NodeId {
        NodeId::new("n1").unwrap()
    }

    #[test]
    fn minimal_valid_packet() {
        let p = make_packet(
            n1(),
            RecordId(1),
            SensorSample::from_f64(25.0, 50.0).unwrap(),
            Timestamp(0),
        )
        .unwrap();
        assert_eq!(p.node_id().as_str(), "n1");
        assert_eq!(p.record_id(), RecordId(1));
        assert_eq!(p.stamped_at(), Timestamp(0));
    }

    #[test]
    fn zero_id_is_reserved() {
        let err = make_packet(
            n1(),
            RecordId(0),
            SensorSample::from_f64(25.0, 50.0).unwrap(),
            Timestamp(0),
        )
        .unwrap_err();
        assert_eq!(err, ModelError::ReservedId);
    }

    #[test]
    fn largest_replay_id() {
        let p = make_packet(
            n1(),
            RecordId(2364),
            SensorSample::from_f64(31.5, 44.0).unwrap(),
            Timestamp(28790),
        )
        .unwrap();
        assert_eq!(p.record_id().get(), 2364);
        assert_eq!(p.sample().temperature(), Tenths(315));
    }

    #[test]
    fn sample_ranges() {
        assert!(SensorSample::from_f64(-40.0, 0.0).is_ok());
        assert!(SensorSample::from_f64(80.0, 100.0).is_ok());
        assert!(matches!(
            SensorSample::from_f64(80.1, 50.0),
            Err(ModelError::Range { field: "temperature", .. })
        ));
        assert!(matches!(
            SensorSample::from_f64(20.0, 142.0),
            Err(ModelError::Range { field: "humidity", .. })
        ));
    }

    #[test]
    fn identity_ignores_payload() {
        let a = make_packet(n1(), RecordId(7), SensorSample::from_f64(20.0, 40.0).unwrap(), Timestamp(5)).unwrap();
        let b = make_packet(n1(), RecordId(7), SensorSample::from_f64(21.0, 41.0).unwrap(), Timestamp(9)).unwrap();
        let c = make_packet(NodeId::new("n2").unwrap(), RecordId(7), a.sample(), a.stamped_at()).unwrap();
        assert_eq!(packet_identity(&a), PacketKey { node_id: n1(), record_id: RecordId(7) });
        assert_eq!(packet_identity(&a), packet_identity(&b));
        assert_ne!(packet_identity(&a), packet_identity(&c));
    }

    #[test]
    fn tenths_text() {
        assert_eq!("25".parse::<Tenths>().unwrap(), Tenths(250));
        assert_eq!("25.3".parse::<Tenths>().unwrap(), Tenths(253));
        assert_eq!("-0.5".parse::<Tenths>().unwrap(), Tenths(-5));
        for bad in ["", "abc", "1.25", "1.", ".5", "--1", "1e3", " 1"] {
            assert!(bad.parse::<Tenths>().is_err(), "{bad:?}");
        }
        assert_eq!(Tenths(-5).to_string(), "-0.5");
        assert_eq!(Tenths(250).to_string(), "25.0");
        assert!(Tenths::from_f64(1.25).is_err());
    }

    #[test]
    fn node_id_validation() {
        assert!(NodeId::new("node_7-a").is_ok());
        assert!(NodeId::new("").is_err());
        assert!(NodeId::new("has space").is_err());
        assert!(NodeId::new("x".repeat(33)).is_err());
    }
}
