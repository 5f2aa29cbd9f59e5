use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "synth.num_videos=16
synth.frames=12
model.dim=16
model.depth=1
model.heads=2
model.max_frames=16
train.epochs=1
train.batch_size=8
";

fn mintime(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mintime"))
        .current_dir(dir)
        .env_remove("MINTIME_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mintime(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), SMALL).unwrap();
    dir
}

#[test]
fn full_pipeline_runs() {
    let dir = setup();
    let d = dir.path();
    fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
        [&["--config", "run.cfg"][..], rest].concat()
    }
    ok(d, &with(&["synth", "--out", "data"]));
    ok(d, &with(&["cluster", "--input", "data/raw.jsonl", "--out", "clustered.jsonl"]));
    ok(d, &with(&["assemble", "--manifest", "clustered.jsonl", "--crops", "data", "--out", "seqs.mnts"]));
    ok(d, &with(&["train", "--sequences", "seqs.mnts", "--out", "ckpt"]));
    ok(d, &with(&["infer", "--checkpoint", "ckpt", "--manifest", "data/manifest.jsonl", "--out", "scores.jsonl"]));
    ok(d, &with(&["eval", "--scores", "scores.jsonl", "--out", "report.json", "--localization", "loc.json"]));
    ok(d, &with(&["plot", "--scores", "scores.jsonl", "--out", "plots"]));
    let stats = ok(d, &["stats", "--manifest", "data/manifest.jsonl"]);

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    for key in ["accuracy", "auc", "fpr", "mav", "per_class"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let loc: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("loc.json")).unwrap()).unwrap();
    assert_eq!(loc.as_array().unwrap().len(), 16);
    assert!(std::fs::read_to_string(d.join("plots/syn00000.svg")).unwrap().starts_with("<svg"));
    let stats: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["videos"], 16);
    assert!(d.join("ckpt/config.txt").is_file());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = setup();
    let d = dir.path();
    for run in ["a", "b"] {
        ok(d, &["--config", "run.cfg", "--seed", "5", "synth", "--out", &format!("{run}/data")]);
        ok(d, &["--config", "run.cfg", "--seed", "5", "train", "--manifest", &format!("{run}/data/manifest.jsonl"), "--out", &format!("{run}/ckpt")]);
        ok(d, &[
            "--config", "run.cfg", "eval", "--checkpoint", &format!("{run}/ckpt"),
            "--manifest", &format!("{run}/data/manifest.jsonl"), "--out", &format!("{run}/report.json"),
        ]);
    }
    let a = std::fs::read(d.join("a/report.json")).unwrap();
    let b = std::fs::read(d.join("b/report.json")).unwrap();
    assert_eq!(a, b);
    let wa = std::fs::read(d.join("a/ckpt/head.fc2.w.mntd")).unwrap();
    let wb = std::fs::read(d.join("b/ckpt/head.fc2.w.mntd")).unwrap();
    assert_eq!(wa, wb);
}

#[test]
fn seed_resolution_order() {
    let dir = setup();
    let d = dir.path();
    let seed_of = |out: Output| String::from_utf8(out.stdout).unwrap().lines().next().unwrap().to_string();
    assert_eq!(seed_of(ok(d, &["--dump-config", "stats", "--manifest", "x"])), "seed=0");
    let env = Command::new(env!("CARGO_BIN_EXE_mintime"))
        .current_dir(d)
        .env("MINTIME_SEED", "11")
        .args(["--dump-config", "stats", "--manifest", "x"])
        .output()
        .unwrap();
    assert_eq!(seed_of(env), "seed=11");
    std::fs::write(d.join("seeded.cfg"), "seed=4\n").unwrap();
    let file = Command::new(env!("CARGO_BIN_EXE_mintime"))
        .current_dir(d)
        .env("MINTIME_SEED", "11")
        .args(["--config", "seeded.cfg", "--dump-config", "stats", "--manifest", "x"])
        .output()
        .unwrap();
    assert_eq!(seed_of(file), "seed=4");
    assert_eq!(
        seed_of(ok(d, &["--config", "seeded.cfg", "--seed", "7", "--dump-config", "stats", "--manifest", "x"])),
        "seed=7"
    );
}

#[test]
fn dumped_config_reloads_identically() {
    let dir = setup();
    let d = dir.path();
    let first = ok(d, &["--config", "run.cfg", "--set", "train.lr=0.02", "--dump-config", "stats", "--manifest", "x"]);
    std::fs::write(d.join("dumped.cfg"), &first.stdout).unwrap();
    let second = ok(d, &["--config", "dumped.cfg", "--dump-config", "stats", "--manifest", "x"]);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn errors_map_to_exit_codes_without_partial_output() {
    let dir = setup();
    let d = dir.path();
    let missing = mintime(d, &["infer", "--checkpoint", "nope", "--manifest", "none.jsonl", "--out", "s.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!d.join("s.jsonl").exists());

    assert_eq!(mintime(d, &["--set", "no.such=1", "stats", "--manifest", "x"]).status.code(), Some(2));
    assert_eq!(mintime(d, &["--set", "model.heads=3", "stats", "--manifest", "x"]).status.code(), Some(2));
    assert_eq!(mintime(d, &["frobnicate"]).status.code(), Some(2));

    std::fs::write(d.join("bad.jsonl"), "{\"not\": \"a header\"}\n").unwrap();
    let bad = mintime(d, &["assemble", "--manifest", "bad.jsonl", "--out", "seqs.mnts"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(!d.join("seqs.mnts").exists());
}
