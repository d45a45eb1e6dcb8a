use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn recsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recsync"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate_preset(dir: &Path, preset: &str) {
    let out = recsync(&["simulate", "--preset", preset, "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(recsync(&["--help"]).status.code(), Some(0));
    assert_eq!(recsync(&["analyze", "--help"]).status.code(), Some(0));
    assert_eq!(recsync(&["reconcile", "--bogus"]).status.code(), Some(2));
    assert_eq!(recsync(&["simulate"]).status.code(), Some(2));
    assert_eq!(recsync(&["simulate", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(recsync(&["scenario", "nope"]).status.code(), Some(2));
}

#[test]
fn simulate_writes_every_output_file() {
    let dir = tempfile::tempdir().unwrap();
    simulate_preset(dir.path(), "paper");
    for name in [
        "local.jsonl",
        "online.jsonl",
        "manifest.json",
        "metrics.json",
        "transmissions_hourly.csv",
        "loss_hourly.csv",
        "redundancy_comparison.csv",
        "recovery_hourly.csv",
    ] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let tx = fs::read_to_string(dir.path().join("transmissions_hourly.csv")).unwrap();
    assert_eq!(tx.lines().next(), Some("hour,generated,received_local,received_online"));
    assert_eq!(tx.lines().count(), 9);
}

#[test]
fn bundled_scenario_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = recsync(&["scenario", "collision"]);
    assert!(out.status.success());
    let file = dir.path().join("collision.toml");
    fs::write(&file, &out.stdout).unwrap();

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    simulate_preset(&a, "collision");
    let run = recsync(&["simulate", "--scenario", p(&file), "--out", p(&b)]);
    assert!(run.status.success());
    for name in ["local.jsonl", "online.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn invalid_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    fs::write(&file, "duration = 0\nseed = 1\n").unwrap();
    let out = recsync(&["simulate", "--scenario", p(&file), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reconcile_without_holes_exits_zero_and_writes_synced_stores() {
    let dir = tempfile::tempdir().unwrap();
    simulate_preset(dir.path(), "collision");
    let synced = dir.path().join("synced");
    let report = dir.path().join("report.json");
    let out = recsync(&[
        "reconcile",
        "--local",
        p(&dir.path().join("local.jsonl")),
        "--online",
        p(&dir.path().join("online.jsonl")),
        "--manifest",
        p(&dir.path().join("manifest.json")),
        "--out",
        p(&report),
        "--synced-dir",
        p(&synced),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["to_online"], 1);
    assert_eq!(r["unrecoverable"], 0);
    assert_eq!(
        fs::read(synced.join("local.jsonl")).unwrap(),
        fs::read(synced.join("online.jsonl")).unwrap()
    );
}

#[test]
fn malformed_store_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"node_id\":\"n1\"}\n").unwrap();
    let out = recsync(&["analyze", "--local", p(&bad), "--online", p(&bad)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let missing = dir.path().join("missing.jsonl");
    let out = recsync(&["reconcile", "--local", p(&missing), "--online", p(&bad)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn replay_detects_a_tampered_store() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("requests.log");
    let out = recsync(&[
        "simulate",
        "--preset",
        "collision",
        "--out",
        p(dir.path()),
        "--request-log",
        p(&log),
    ]);
    assert!(out.status.success());
    let online = dir.path().join("online.jsonl");
    let args = |online: &Path| {
        recsync(&[
            "replay",
            "--log",
            p(&log),
            "--local",
            p(&dir.path().join("local.jsonl")),
            "--online",
            p(online),
        ])
    };
    assert_eq!(args(&online).status.code(), Some(0));

    let text = fs::read_to_string(&online).unwrap();
    let trimmed: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let tampered = dir.path().join("tampered.jsonl");
    fs::write(&tampered, trimmed).unwrap();
    assert_eq!(args(&tampered).status.code(), Some(1));
}

#[test]
fn naive_counter_mode_surfaces_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = recsync(&[
        "simulate",
        "--preset",
        "collision",
        "--counter-mode",
        "naive-reset",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different payload"));
}

#[test]
fn counter_file_persists_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let counter = dir.path().join("counter");
    for _ in 0..2 {
        let out = recsync(&[
            "simulate",
            "--preset",
            "collision",
            "--counter-file",
            p(&counter),
            "--out",
            p(dir.path()),
        ]);
        assert!(out.status.success());
    }
    let n: u64 = fs::read_to_string(&counter).unwrap().trim().parse().unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["max_record_id"].as_u64(), Some(n));
    assert_eq!(n, 2 * manifest["generated"].as_u64().unwrap());
}
