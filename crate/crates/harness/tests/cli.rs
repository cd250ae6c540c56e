use std::fs::File;
use std::path::Path;
use std::process::Command;

use dabd_harness::metrics::read_csv;
use dabd_harness::snapshot::Snapshot;

fn dabd(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dabd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "dabd {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn funnel_file(dir: &Path) -> String {
    let scene = dir.join("funnel.json");
    dabd(&["scenario", "funnel", "--out", scene.to_str().unwrap()]);
    scene.to_str().unwrap().to_string()
}

fn simulate(scene: &str, out: &Path, workers: &str, transport: &str, frames: &str) {
    dabd(&[
        "simulate",
        "--scene",
        scene,
        "--workers",
        workers,
        "--transport",
        transport,
        "--frames",
        frames,
        "--out",
        out.to_str().unwrap(),
    ]);
}

fn snapshots(dir: &Path, frames: u64) -> Vec<Snapshot> {
    (0..frames)
        .map(|f| Snapshot::read(&dir.join(Snapshot::file_name(f))).unwrap())
        .collect()
}

#[test]
fn repeated_runs_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = funnel_file(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&scene, &a, "2", "inproc", "8");
    simulate(&scene, &b, "2", "inproc", "8");
    let ra = read_csv(File::open(a.join("metrics.csv")).unwrap()).unwrap();
    let rb = read_csv(File::open(b.join("metrics.csv")).unwrap()).unwrap();
    assert!(ra.len() >= 8);
    let strip = |r: &[dabd_harness::MetricsRecord]| {
        r.iter().map(|x| x.without_timing()).collect::<Vec<_>>()
    };
    assert_eq!(strip(&ra), strip(&rb));
    assert_eq!(snapshots(&a, 8), snapshots(&b, 8));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 8);
    assert_eq!(summary["intersecting_frames"], 0);
}

#[test]
fn transports_agree_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = funnel_file(tmp.path());
    let runs: Vec<_> = ["inproc", "tcp", "sequential"]
        .iter()
        .map(|t| {
            let dir = tmp.path().join(t);
            simulate(&scene, &dir, "2", t, "6");
            snapshots(&dir, 6)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn single_worker_matches_reference_command() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = funnel_file(tmp.path());
    let (d, r) = (tmp.path().join("dist"), tmp.path().join("ref"));
    simulate(&scene, &d, "1", "sequential", "10");
    dabd(&[
        "reference",
        "--scene",
        &scene,
        "--frames",
        "10",
        "--out",
        r.to_str().unwrap(),
    ]);
    assert_eq!(snapshots(&d, 10), snapshots(&r, 10));
}

#[test]
fn unknown_scenario_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_dabd"))
        .args(["scenario", "nope", "--out", "/dev/null"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
