use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use recsync_core::channel::LinkName;
use recsync_core::reconciler::{diff, reconcile, timestamp_merge_baseline};
use recsync_core::simulator::{paper_scenario, run};
use recsync_core::store::ServerStore;
use recsync_core::RecordId;

fn id_sets(n: u64) -> (BTreeSet<RecordId>, BTreeSet<RecordId>) {
    let local = (1..=n).filter(|k| k % 97 != 0).map(RecordId).collect();
    let online = (1..=n).filter(|k| k % 13 != 0).map(RecordId).collect();
    (local, online)
}

fn bench_diff(c: &mut Criterion) {
    let (local, online) = id_sets(100_000);
    c.bench_function("diff 100k ids", |b| {
        b.iter(|| diff(black_box(&local), black_box(&online), Some(RecordId(100_000))))
    });
}

fn bench_stores(c: &mut Criterion) {
    let r = run(&paper_scenario()).unwrap();
    c.bench_function("reconcile paper preset", |b| {
        b.iter(|| reconcile(&r.local, &r.online, Some(&r.metrics.manifest)).unwrap())
    });
    c.bench_function("timestamp merge paper preset", |b| {
        b.iter(|| timestamp_merge_baseline(&r.local, &r.online))
    });
    let packets: Vec<_> = r.local.packets().cloned().collect();
    c.bench_function("insert 2356 packets", |b| {
        b.iter_batched(
            || packets.clone(),
            |ps| {
                let mut s = ServerStore::new(LinkName::Local);
                for p in ps {
                    s.insert(p).unwrap();
                }
                s
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_diff, bench_stores);
criterion_main!(benches);
