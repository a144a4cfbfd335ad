use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use occlift_cli::{RunManifest, MANIFEST_FILE};

fn occlift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occlift"))
        .current_dir(dir)
        .env("OCCLIFT_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = occlift(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_category(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    v["error"]["category"].as_str().unwrap().to_string()
}

fn tiny_data(dir: &Path) -> PathBuf {
    ok(dir, &["synth", "--actions", "2", "--per-action", "4", "--frames", "60", "--seed", "3", "--out", "data"]);
    dir.join("data")
}

fn tiny_model(dir: &Path, name: &str, variant: &str) {
    ok(
        dir,
        &["train", "--data", "data", variant, "--channels", "8", "--blocks", "1", "--epochs", "1", "--seed", "5", "--out", name],
    );
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn manifests_in(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == MANIFEST_FILE)
        .count()
}

#[test]
fn synth_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let manifest = RunManifest::load(&data).unwrap();
    assert_eq!(manifest.command, "synth");
    assert_eq!(manifest.seeds["synth"], 3);
    let index: serde_json::Value = serde_json::from_slice(&fs::read(data.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["entries"].as_array().unwrap().len(), 8);
    assert_eq!(manifests_in(&data), 1);

    ok(tmp.path(), &["synth", "--actions", "2", "--per-action", "4", "--frames", "60", "--seed", "3", "--out", "again"]);
    assert_eq!(files(&data), files(&tmp.path().join("again")));
}

#[test]
fn synth_refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    let args = ["synth", "--actions", "2", "--per-action", "4", "--frames", "60", "--seed", "3", "--out", "data"];
    let out = occlift(tmp.path(), &args);
    assert!(!out.status.success());
    assert_eq!(error_category(&out), "io");
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(tmp.path(), &forced);
    assert_eq!(manifests_in(&tmp.path().join("data")), 1);
}

#[test]
fn missing_out_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = occlift(tmp.path(), &["synth", "--actions", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    ok(
        tmp.path(),
        &["train", "--data", "data", "--guided", "--channels", "8", "--blocks", "1", "--epochs", "2", "--val", "--out", "g"],
    );
    let run = tmp.path().join("g");
    let ckpt = occlift_core::load_checkpoint::<f32>(run.join("model.ckpt")).unwrap();
    assert!(ckpt.config().guided());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["val_mpjpe_p1_mm"].as_f64().unwrap() > 0.0));
    let manifest = RunManifest::load(&run).unwrap();
    assert_eq!(manifest.resolved["lifter"]["in_dims_per_joint"], 4);
    assert_eq!(manifest.resolved["training"]["epochs"], 2);
}

#[test]
fn baseline_flag_trains_two_channel_model() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    tiny_model(tmp.path(), "b", "--baseline");
    let ckpt = occlift_core::load_checkpoint::<f32>(tmp.path().join("b/model.ckpt")).unwrap();
    assert_eq!(ckpt.config().in_dims_per_joint, 2);
    assert_eq!(ckpt.input_channels(), 17 * 2);
}

#[test]
fn invalid_channels_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    let out = occlift(tmp.path(), &["train", "--data", "data", "--guided", "--channels", "0", "--out", "bad"]);
    assert_eq!(error_category(&out), "config");
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn guided_and_baseline_are_exclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let out = occlift(tmp.path(), &["train", "--data", "d", "--guided", "--baseline", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_topology_is_lookup_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = occlift(tmp.path(), &["synth", "--topology", "h36m99", "--out", "d"]);
    assert_eq!(error_category(&out), "lookup");
}

#[test]
fn eval_reports_one_column_per_level() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    tiny_model(tmp.path(), "g", "--guided");
    let dir = tmp.path();
    ok(dir, &["eval", "--ckpt", "g", "--data", "data", "--scheme", "random", "--k", "0,4,8,12", "--seed", "9", "--out", "r"]);
    let csv = fs::read_to_string(dir.join("r/eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,rand0,rand4,rand8,rand12"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "guided");
    assert!(row[1..].iter().all(|v| v.parse::<f64>().unwrap() > 0.0));

    ok(dir, &["eval", "--ckpt", "g/model.ckpt", "--data", "data", "--scheme", "blackout", "--t", "1,3,5", "--out", "t"]);
    let csv = fs::read_to_string(dir.join("t/eval.csv")).unwrap();
    assert!(csv.starts_with("model,t1,t3,t5\n"));

    ok(dir, &["eval", "--ckpt", "g", "--data", "data", "--scheme", "part", "--part", "LowerBody", "--out", "p"]);
    let csv = fs::read_to_string(dir.join("p/eval.csv")).unwrap();
    assert!(csv.starts_with("model,LowerBody\n"));

    let out = occlift(dir, &["eval", "--ckpt", "g", "--data", "data", "--scheme", "part", "--part", "Tail", "--out", "x"]);
    assert_eq!(error_category(&out), "lookup");
    let out = occlift(dir, &["eval", "--ckpt", "g", "--data", "data", "--scheme", "random", "--out", "y"]);
    assert_eq!(error_category(&out), "usage");
}

#[test]
fn fixed_blackout_start_is_recorded_in_masks() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    tiny_model(tmp.path(), "g", "--guided");
    let args = [
        "eval", "--ckpt", "g", "--data", "data", "--scheme", "blackout", "--t", "3", "--start", "10", "--save-masks", "--out", "m",
    ];
    ok(tmp.path(), &args);
    let masks = tmp.path().join("m/masks/t3");
    let entries: Vec<_> = fs::read_dir(&masks).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 4);
    for path in entries {
        let mask = occlift_core::occlusion::load_mask(&path).unwrap();
        let blank: Vec<usize> = (0..mask.frames).filter(|&f| mask.missing_in_frame(f) == mask.n_joints).collect();
        assert_eq!(blank, vec![10, 11, 12]);
    }
}

#[test]
fn eval_is_reproducible_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    tiny_model(tmp.path(), "g", "--guided");
    let dir = tmp.path();
    ok(dir, &["eval", "--ckpt", "g", "--data", "data", "--k", "0,5", "--seed", "4", "--save-masks", "--out", "a"]);
    ok(dir, &["replay", "a/manifest.json", "--out", "b"]);
    assert_eq!(files(&dir.join("a")), files(&dir.join("b")));
    for level in ["rand0", "rand5"] {
        assert_eq!(files(&dir.join("a/masks").join(level)), files(&dir.join("b/masks").join(level)));
    }
    let a = RunManifest::load(dir.join("a")).unwrap().without_timestamps();
    let mut b = RunManifest::load(dir.join("b")).unwrap().without_timestamps();
    assert_ne!(a, b);
    b.config["out"] = "a".into();
    assert_eq!(a, b);
}

#[test]
fn train_replay_reproduces_checkpoint_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    tiny_model(tmp.path(), "g", "--guided");
    ok(tmp.path(), &["replay", "g", "--out", "g2"]);
    let read = |run: &str| fs::read(tmp.path().join(run).join("model.ckpt")).unwrap();
    assert!(read("g") == read("g2"), "checkpoints differ");
    let losses = |run: &str| -> Vec<f64> {
        fs::read_to_string(tmp.path().join(run).join("train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["train_loss_mm"].as_f64().unwrap())
            .collect()
    };
    assert_eq!(losses("g"), losses("g2"));
}

#[test]
fn sweep_emits_receptive_field_triples() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    let args = [
        "sweep-seqlen", "--data", "data", "--blocks-list", "0,1", "--k", "0,4", "--channels", "8", "--epochs", "1", "--out",
    ];
    let mut first = args.to_vec();
    first.push("s1");
    ok(tmp.path(), &first);
    let csv = fs::read_to_string(tmp.path().join("s1/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "receptive_field,k,mpjpe_mm");
    let keys: Vec<String> = rows[1..].iter().map(|r| r.rsplitn(2, ',').nth(1).unwrap().to_string()).collect();
    assert_eq!(keys, ["3,0", "3,4", "9,0", "9,4"]);

    let mut second = args.to_vec();
    second.push("s2");
    ok(tmp.path(), &second);
    assert_eq!(fs::read(tmp.path().join("s1/sweep.csv")).unwrap(), fs::read(tmp.path().join("s2/sweep.csv")).unwrap());
}

#[test]
fn sweep_with_empty_k_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    for k in [vec!["--k", ""], vec![]] {
        let mut args = vec!["sweep-seqlen", "--data", "data", "--blocks-list", "1,2", "--out", "s"];
        args.extend(k);
        assert_eq!(occlift(tmp.path(), &args).status.code(), Some(2));
    }
}

#[test]
fn quality_report_rows_are_levels() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    tiny_model(tmp.path(), "g", "--guided");
    tiny_model(tmp.path(), "b", "--baseline");
    let args = [
        "quality", "--data", "data", "--ckpt", "g", "--ckpt", "plain=b", "--k", "0,8", "--size", "16", "--clip-frames", "30",
        "--epochs", "2", "--out",
    ];
    let mut first = args.to_vec();
    first.push("q1");
    ok(tmp.path(), &first);
    let csv = fs::read_to_string(tmp.path().join("q1/accuracy.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["occlusion", "ground_truth", "g", "plain"]);
    assert_eq!(rows[1][0], "rand0");
    assert_eq!(rows[2][0], "rand8");
    for v in rows[1..].iter().flat_map(|r| &r[1..]) {
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=100.0).contains(&v));
    }
    let mut second = args.to_vec();
    second.push("q2");
    ok(tmp.path(), &second);
    assert_eq!(files(&tmp.path().join("q1")), files(&tmp.path().join("q2")));
}

#[test]
fn bad_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_occlift"))
        .current_dir(tmp.path())
        .env("OCCLIFT_THREADS", "0")
        .args(["synth", "--actions", "2", "--per-action", "2", "--frames", "10", "--out", "d"])
        .output()
        .unwrap();
    assert_eq!(error_category(&out), "usage");
}
