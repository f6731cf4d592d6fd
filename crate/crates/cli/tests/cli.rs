use std::fs;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_streamtrack")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn make_train_track_eval_profile() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["make-data", "--out", s(&data), "--clips", "2", "--seed", "5", "--frames", "12", "--height", "64", "--width", "64"]);
    let clip = data.join("clip_00000");
    assert!(clip.join("frames.bin").is_file());

    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, "preset = tiny\n# two steps only\nsteps = 2\nbatch = 1\n").unwrap();
    let out = dir.path().join("run");
    run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let ck = out.join("checkpoint.tron");
    assert!(ck.is_file());
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let pred = dir.path().join("pred.jsonl");
    run(&["track", "--checkpoint", s(&ck), "--clip", s(&clip), "--out", s(&pred), "--memory-size", "8"]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&pred).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[3]["t"], 3);

    let stdout = run(&["track", "--checkpoint", s(&ck), "--clip", s(&clip), "--support-grid"]);
    assert_eq!(stdout.lines().count(), 12);

    let report: serde_json::Value = serde_json::from_str(&run(&["eval", "--pred", s(&pred), "--gt", s(&clip)])).unwrap();
    let oa = report["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));

    let prof: serde_json::Value =
        serde_json::from_str(&run(&["profile", "--checkpoint", s(&ck), "--frames", "3", "--tracks", "4", "--window", "1,2"])).unwrap();
    assert_eq!(prof["tracks"], 4);
    assert_eq!(prof["window_comparator"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_input_exits_nonzero() {
    let out = Command::new(env!("CARGO_BIN_EXE_streamtrack")).args(["eval", "--pred", "/nonexistent", "--gt", "/nonexistent"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
