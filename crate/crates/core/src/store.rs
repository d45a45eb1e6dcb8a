//! Identity-keyed packet store with a timestamp index, JSONL import/export
//! and a CSV mirror.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::channel::LinkName;
use crate::model::{NodeId, Packet, PacketKey, PacketRow, RecordId, Timestamp};

/// Header line of the CSV mirror; same field order as the JSONL rows.
pub const CSV_HEADER: &str = "node_id,record_id,temperature,humidity,stamped_at";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("identity {key} already stored with a different payload")]
    Conflict {
        key: PacketKey,
        existing: Box<Packet>,
        incoming: Box<Packet>,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    DuplicateIgnored,
}

/// Which server a store belongs to.
pub type StoreKind = LinkName;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerStore {
    kind: StoreKind,
    records: BTreeMap<PacketKey, Packet>,
    ts_index: BTreeMap<Timestamp, BTreeSet<PacketKey>>,
}

impl ServerStore {
    pub fn new(kind: StoreKind) -> Self {
        ServerStore {
            kind,
            records: BTreeMap::new(),
            ts_index: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inserts `p` unless its identity is already present.
    ///
    /// Re-inserting an identical packet is a no-op; an equal identity with a
    /// different payload is refused so that counter collisions surface.
    pub fn insert(&mut self, p: Packet) -> Result<InsertOutcome, StoreError> {
        let key = p.key();
        if let Some(existing) = self.records.get(&key) {
            if *existing == p {
                return Ok(InsertOutcome::DuplicateIgnored);
            }
            return Err(StoreError::Conflict {
                key,
                existing: Box::new(existing.clone()),
                incoming: Box::new(p),
            });
        }
        self.ts_index
            .entry(p.stamped_at())
            .or_default()
            .insert(key.clone());
        self.records.insert(key, p);
        Ok(InsertOutcome::Inserted)
    }

    pub fn get(&self, node_id: &NodeId, record_id: RecordId) -> Option<&Packet> {
        self.records.get(&PacketKey {
            node_id: node_id.clone(),
            record_id,
        })
    }

    pub fn contains(&self, key: &PacketKey) -> bool {
        self.records.contains_key(key)
    }

    /// Record ids held for `node_id`, ascending.
    pub fn ids(&self, node_id: &NodeId) -> BTreeSet<RecordId> {
        let lo = PacketKey {
            node_id: node_id.clone(),
            record_id: RecordId(0),
        };
        self.records
            .range(lo..)
            .take_while(|(k, _)| &k.node_id == node_id)
            .map(|(k, _)| k.record_id)
            .collect()
    }

    pub fn node_ids(&self) -> BTreeSet<NodeId> {
        self.records.keys().map(|k| k.node_id.clone()).collect()
    }

    /// Packets in (node_id, record_id) order.
    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.records.values()
    }

    pub fn at_timestamp(&self, t: Timestamp) -> impl Iterator<Item = &Packet> {
        self.ts_index
            .get(&t)
            .into_iter()
            .flatten()
            .map(|k| &self.records[k])
    }

    pub fn timestamp_index(&self) -> &BTreeMap<Timestamp, BTreeSet<PacketKey>> {
        &self.ts_index
    }

    /// Checks that the timestamp index is exactly the inverse of the records.
    pub fn audit(&self) -> Result<(), String> {
        let mut rebuilt: BTreeMap<Timestamp, BTreeSet<PacketKey>> = BTreeMap::new();
        for (k, p) in &self.records {
            if *k != p.key() {
                return Err(format!("record filed under {k} has identity {}", p.key()));
            }
            rebuilt.entry(p.stamped_at()).or_default().insert(k.clone());
        }
        if rebuilt != self.ts_index {
            return Err("timestamp index does not match records".into());
        }
        Ok(())
    }

    /// Writes one JSON object per line, sorted by identity. Returns the
    /// number of records written.
    pub fn export(&self, path: &Path) -> Result<usize, StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_owned(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        self.write_jsonl(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(self.len())
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> io::Result<()> {
        for p in self.packets() {
            writeln!(w, "{}", packet_to_json_line(p))?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn export_csv(&self, path: &Path) -> Result<usize, StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_owned(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        writeln!(w, "{CSV_HEADER}").map_err(io_err)?;
        for p in self.packets() {
            let s = p.sample();
            writeln!(
                w,
                "{},{},{},{},{}",
                p.node_id(),
                p.record_id(),
                s.temperature(),
                s.humidity(),
                p.stamped_at()
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(self.len())
    }

    /// Loads a JSONL export. Blank lines are skipped; any malformed or
    /// out-of-range line fails with its 1-based line number.
    pub fn import(path: &Path, kind: StoreKind) -> Result<ServerStore, StoreError> {
        let file = fs::File::open(path).map_err(|source| StoreError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::read_jsonl(BufReader::new(file), kind, path)
    }

    pub fn read_jsonl(
        reader: impl BufRead,
        kind: StoreKind,
        origin: &Path,
    ) -> Result<ServerStore, StoreError> {
        let mut store = ServerStore::new(kind);
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| StoreError::Io {
                path: origin.to_owned(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let format_err = |message: String| StoreError::Format {
                path: origin.to_owned(),
                line: line_no,
                message,
            };
            let packet = packet_from_json_line(&line).map_err(format_err)?;
            store.insert(packet).map_err(|e| format_err(e.to_string()))?;
        }
        Ok(store)
    }
}

pub fn packet_to_json_line(p: &Packet) -> String {
    serde_json::to_string(&p.to_row()).expect("packet rows always serialize")
}

pub fn packet_from_json_line(line: &str) -> Result<Packet, String> {
    let row: PacketRow = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Packet::try_from(row).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_packet, SensorSample};

    fn pkt(id: u64, t: f64, ts: u64) -> Packet {
        make_packet(
            NodeId::default(),
            RecordId(id),
            SensorSample::from_f64(t, 50.0).unwrap(),
            Timestamp(ts),
        )
        .unwrap()
    }

    #[test]
    fn insert_then_duplicate() {
        let mut s = ServerStore::new(LinkName::Local);
        assert_eq!(s.insert(pkt(1, 25.0, 0)).unwrap(), InsertOutcome::Inserted);
        assert_eq!(s.len(), 1);
        let before = s.clone();
        assert_eq!(s.insert(pkt(1, 25.0, 0)).unwrap(), InsertOutcome::DuplicateIgnored);
        assert_eq!(s, before);
    }

    #[test]
    fn conflicting_payload_is_refused() {
        let mut s = ServerStore::new(LinkName::Local);
        s.insert(pkt(1, 25.0, 0)).unwrap();
        let err = s.insert(pkt(1, 26.0, 0)).unwrap_err();
        assert!(matches!(err, StoreError::Conflict { .. }));
        assert_eq!(s.get(&NodeId::default(), RecordId(1)).unwrap().sample().temperature().0, 250);
        s.audit().unwrap();
    }

    #[test]
    fn ids_per_node() {
        let mut s = ServerStore::new(LinkName::Online);
        assert!(s.ids(&NodeId::default()).is_empty());
        for id in [4, 1, 3] {
            s.insert(pkt(id, 20.0, id * 10)).unwrap();
        }
        let other = NodeId::new("n2").unwrap();
        s.insert(make_packet(other.clone(), RecordId(2), SensorSample::from_f64(1.0, 1.0).unwrap(), Timestamp(0)).unwrap())
            .unwrap();
        let ids: Vec<u64> = s.ids(&NodeId::default()).into_iter().map(RecordId::get).collect();
        assert_eq!(ids, vec![1, 3, 4]);
        assert_eq!(s.ids(&other).len(), 1);
        assert_eq!(s.node_ids().len(), 2);
        s.audit().unwrap();
    }

    #[test]
    fn timestamp_index_tracks_collisions() {
        let mut s = ServerStore::new(LinkName::Local);
        s.insert(pkt(1, 20.0, 5)).unwrap();
        s.insert(pkt(2, 21.0, 5)).unwrap();
        s.insert(pkt(3, 22.0, 6)).unwrap();
        assert_eq!(s.at_timestamp(Timestamp(5)).count(), 2);
        assert_eq!(s.timestamp_index().len(), 2);
        s.audit().unwrap();
    }

    #[test]
    fn json_line_shape() {
        let line = packet_to_json_line(&pkt(7, 25.3, 90));
        assert_eq!(
            line,
            r#"{"node_id":"n1","record_id":7,"temperature":25.3,"humidity":50.0,"stamped_at":90}"#
        );
    }

    #[test]
    fn export_import_round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ServerStore::new(LinkName::Local);
        for (id, t) in [(3, 20.1), (1, -5.5), (2, 79.9)] {
            s.insert(pkt(id, t, id)).unwrap();
        }
        let path = dir.path().join("local.jsonl");
        assert_eq!(s.export(&path).unwrap(), 3);
        let back = ServerStore::import(&path, LinkName::Local).unwrap();
        assert_eq!(back, s);
        let text = fs::read_to_string(&path).unwrap();
        let ids: Vec<_> = text.lines().map(|l| packet_from_json_line(l).unwrap().record_id().get()).collect();
        assert_eq!(ids, vec![1, 2, 3]);

        let csv_path = dir.path().join("local.csv");
        s.export_csv(&csv_path).unwrap();
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(
            csv,
            format!("{CSV_HEADER}\nn1,1,-5.5,50.0,1\nn1,2,79.9,50.0,2\nn1,3,20.1,50.0,3\n")
        );
    }

    #[test]
    fn import_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = packet_to_json_line(&pkt(1, 25.0, 0));
        let bad = r#"{"node_id":"n1","record_id":2,"temperature":25.0,"humidity":142.0,"stamped_at":10}"#;
        fs::write(&path, format!("{good}\n\n{bad}\n")).unwrap();
        match ServerStore::import(&path, LinkName::Online).unwrap_err() {
            StoreError::Format { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("humidity"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn import_rejects_garbage_and_zero_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        for (body, line) in [
            ("not json\n".to_owned(), 1),
            (r#"{"node_id":"n1","record_id":0,"temperature":1.0,"humidity":1.0,"stamped_at":1}"#.to_owned() + "\n", 1),
            (r#"{"node_id":"n1","record_id":1,"temperature":1.25,"humidity":1.0,"stamped_at":1}"#.to_owned() + "\n", 1),
            (r#"{"node_id":"n1","record_id":1,"temperature":1.0,"humidity":1.0,"stamped_at":1,"x":1}"#.to_owned() + "\n", 1),
        ] {
            fs::write(&path, body).unwrap();
            assert!(matches!(
                ServerStore::import(&path, LinkName::Online),
                Err(StoreError::Format { line: l, .. }) if l == line
            ));
        }
    }
}
