use std::collections::BTreeSet;

use recsync_core::channel::{LatencyModel, LinkName, LinkSpec, LossModel};
use recsync_core::ingest::{encode_form, Ack, IngestClient, IngestServer, IngestState};
use recsync_core::node::{run_node, NodeConfig};
use recsync_core::reconciler::{id_merge, reconcile, timestamp_merge_baseline};
use recsync_core::simulator::{
    collision_scenario, paper_scenario, replay_log, run, write_outputs, Transport,
};
use recsync_core::store::ServerStore;
use recsync_core::{NodeId, RecordId};

#[test]
fn paper_preset_counts() {
    let r = run(&paper_scenario()).unwrap();
    let m = &r.metrics;
    m.check().unwrap();
    assert_eq!(
        (m.generated, m.delivered_local, m.delivered_online),
        (2364, 2356, 2190)
    );
    assert_eq!((m.lost_local, m.lost_online, m.lost_both), (8, 174, 3));
    assert_eq!(m.manifest.max_record_id, RecordId(2364));
    assert_eq!(r.local.len(), 2356);
    assert_eq!(r.online.len(), 2190);
}

#[test]
fn paper_preset_reconciles_to_three_holes() {
    let r = run(&paper_scenario()).unwrap();
    let out = reconcile(&r.local, &r.online, Some(&r.metrics.manifest)).unwrap();
    let rep = &out.report;
    assert_eq!((rep.to_online, rep.to_local, rep.unrecoverable), (171, 5, 3));
    assert_eq!(rep.synchronized, 2361);
    assert_eq!(rep.sync_rate_percent.to_string(), "99.87");
    let holes: Vec<u64> = rep.unrecoverable_ids.iter().map(|k| k.record_id.get()).collect();
    assert_eq!(holes, vec![113, 372, 990]);
    assert!(out.local.packets().eq(out.online.packets()));

    // Reconciling the output again finds nothing to copy.
    let again = reconcile(&out.local, &out.online, Some(&r.metrics.manifest)).unwrap();
    assert_eq!(again.report.to_online + again.report.to_local, 0);
    assert_eq!(again.report.unrecoverable, 3);
}

#[test]
fn paper_preset_redundancy() {
    let r = run(&paper_scenario()).unwrap();
    assert_eq!(id_merge(&r.local, &r.online).unwrap().duplicates, 0);
    assert!(timestamp_merge_baseline(&r.local, &r.online).duplicates > 0);
}

#[test]
fn collision_preset_has_523_timestamp_duplicates() {
    let r = run(&collision_scenario()).unwrap();
    assert_eq!(timestamp_merge_baseline(&r.local, &r.online).duplicates, 523);
    assert_eq!(id_merge(&r.local, &r.online).unwrap().duplicates, 0);
}

#[test]
fn direct_and_loopback_agree() {
    let mut s = paper_scenario();
    let direct = run(&s).unwrap();
    s.transport = Transport::Loopback;
    let wire = run(&s).unwrap();
    assert_eq!(direct.local, wire.local);
    assert_eq!(direct.online, wire.online);
    assert_eq!(direct.metrics, wire.metrics);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = write_outputs(&run(&paper_scenario()).unwrap(), a.path()).unwrap();
    write_outputs(&run(&paper_scenario()).unwrap(), b.path()).unwrap();
    assert!(!files.is_empty());
    for f in files {
        let name = f.file_name().unwrap();
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name:?} differs");
    }
}

#[test]
fn request_log_replay_rebuilds_the_stores() {
    let r = run(&paper_scenario()).unwrap();
    let local = IngestState::new(ServerStore::new(LinkName::Local));
    let online = IngestState::new(ServerStore::new(LinkName::Online));
    let log = r.request_log();
    let (inserted, dups) = replay_log(&log, &local, &online).unwrap();
    assert_eq!((inserted, dups), (2356 + 2190, 0));
    assert_eq!(local.snapshot(), r.local);
    assert_eq!(online.snapshot(), r.online);

    // A second pass is all duplicates and changes nothing.
    let (inserted, dups) = replay_log(&log, &local, &online).unwrap();
    assert_eq!((inserted, dups), (0, 2356 + 2190));
    assert_eq!(local.snapshot(), r.local);
}

#[test]
fn loopback_delivers_exactly_the_undropped_packets() {
    let node = NodeId::default();
    let emissions = run_node(&NodeConfig::new(10), 1000, 5).unwrap();
    assert_eq!(emissions.len(), 100);
    let spec = LinkSpec {
        loss: LossModel::Schedule {
            dropped: (1..=10).map(|k| k * 10).collect(),
        },
        latency: LatencyModel::Fixed { seconds: 0 },
        seed: 0,
    };
    let mut link = recsync_core::channel::Link::new(LinkName::Local, spec);
    let server = IngestServer::start(IngestState::new(ServerStore::new(LinkName::Local)), 0).unwrap();
    let client = IngestClient::new(server.base_url());
    for e in &emissions {
        if link.send(&e.packet, e.emitted_at).1.is_delivered() {
            assert_eq!(client.send(&e.packet).unwrap(), Ack::Inserted);
        }
    }
    let ids = client.ids(&node).unwrap();
    assert_eq!(ids.len(), 90);
    let expected: BTreeSet<RecordId> = (1..=100).filter(|k| k % 10 != 0).map(RecordId).collect();
    assert_eq!(ids.into_iter().collect::<BTreeSet<_>>(), expected);

    // Resending an acknowledged packet is acknowledged again without a new row.
    assert_eq!(client.send(&emissions[0].packet).unwrap(), Ack::Duplicate);
    let malformed = client.post_form("node_id=n1&record_id=zero").unwrap();
    assert_eq!(malformed.status, 400);
    let store = server.shutdown();
    assert_eq!(store.len(), 90);
    assert_eq!(encode_form(&emissions[1].packet).split('&').count(), 5);
}
