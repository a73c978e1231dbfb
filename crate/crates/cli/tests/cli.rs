use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use serde_json::Value;

use csen_cli::RunConfig;
use csen_core::checkpoint::Checkpoint;

fn csen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csen"))
        .args(args)
        .env("CSEN_THREADS", "1")
        .output()
        .expect("spawn csen")
}

fn ok(args: &[&str]) -> Value {
    let out = csen(args);
    assert!(
        out.status.success(),
        "csen {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Smoke corpus and one trained smoke run, shared across tests.
struct Fixture {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        ok(&["synth", "--profile", "smoke", "--out", s(&corpus)]);
        let manifest = corpus.join("manifest.jsonl");
        let run = dir.path().join("run");
        ok(&["train", "--profile", "smoke", "--data", s(&manifest), "--out", s(&run)]);
        Fixture { _dir: dir, manifest, run }
    })
}

#[test]
fn default_synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = ok(&["synth", "--out", s(&a)]);
    assert_eq!(summary["images"], 2400);
    ok(&["synth", "--out", s(&b)]);
    let ma = std::fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 2400);
    let first = std::fs::read_dir(a.join("images")).unwrap().next().unwrap().unwrap().file_name();
    assert_eq!(
        std::fs::read(a.join("images").join(&first)).unwrap(),
        std::fs::read(b.join("images").join(&first)).unwrap()
    );
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = csen(&["synth", "--set", "train.augment.bogus=1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.augment.bogus"), "{}", stderr(&out));

    let out = csen(&["synth", "--set", "synth.noise_level=3", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("noise_level"), "{}", stderr(&out));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"d_f": 48, "groups": 5}}"#).unwrap();
    let out = csen(&["train", "--config", s(&cfg), "--data", "x.jsonl", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("groups"), "{}", stderr(&out));
}

#[test]
fn runtime_and_usage_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = csen(&["train", "--profile", "smoke", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.jsonl"));

    let out = csen(&["train", "--profile", "smoke", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_csen"))
        .args(["verify"])
        .env("CSEN_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("CSEN_THREADS"));

    assert_eq!(csen(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn smoke_training_writes_its_artifacts() {
    let t0 = Instant::now();
    let f = fixture();
    assert!(t0.elapsed().as_secs_f64() < 60.0);
    for name in ["checkpoint.ckpt", "history.json", "report.json", "resolved_config.json", "run_info.json"] {
        assert!(f.run.join(name).exists(), "missing {name}");
    }
    let info = read_json(&f.run.join("run_info.json"));
    assert_eq!(info["command"], "train");
    let cfg: RunConfig = serde_json::from_value(read_json(&f.run.join("resolved_config.json"))).unwrap();
    assert_eq!(info["config_hash"], cfg.hash());
    let history = read_json(&f.run.join("history.json"));
    let steps = history["steps"].as_array().unwrap();
    assert!(!steps.is_empty());
    assert!(steps.iter().all(|s| s["loss"].as_f64().unwrap().is_finite()));
}

#[test]
fn resume_from_epoch_checkpoint_matches_a_straight_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (full, resumed) = (dir.path().join("full"), dir.path().join("resumed"));
    let common = ["--profile", "smoke", "--set", "train.checkpoint_every=1", "--data", s(&f.manifest)];
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--out", s(&full)]);
    ok(&args);
    let snapshot = full.join("checkpoints/epoch_001.ckpt");
    assert!(snapshot.exists());
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--out", s(&resumed), "--resume", s(&snapshot)]);
    ok(&args);
    for name in ["checkpoint.ckpt", "history.json"] {
        assert_eq!(
            std::fs::read(full.join(name)).unwrap(),
            std::fs::read(resumed.join(name)).unwrap(),
            "{name} differs after resume"
        );
    }

    // A checkpoint from another seed is refused.
    let out = csen(&[
        "train", "--profile", "smoke", "--set", "train.seed=1", "--data", s(&f.manifest),
        "--out", s(&dir.path().join("other")), "--resume", s(&snapshot),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablations_drop_their_parameters() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let names = |ck: &Path| -> Vec<String> { Checkpoint::load(ck).unwrap().tensors.into_keys().collect() };
    let has = |v: &[String], p: &str| v.iter().any(|n| n.starts_with(p));
    let full = names(&f.run.join("checkpoint.ckpt"));
    assert!(has(&full, "param/sem.") && has(&full, "param/afem.") && has(&full, "param/side."));
    let expect = [
        ("no-sem", [false, false, true]),
        ("no-afem", [true, false, true]),
        ("no-cv", [true, true, false]),
        ("baseline", [false, false, false]),
    ];
    for (ablate, [sem, afem, side]) in expect {
        let out = dir.path().join(ablate);
        ok(&[
            "train", "--profile", "smoke", "--set", "train.epochs=1", "--data", s(&f.manifest),
            "--out", s(&out), "--ablate", ablate,
        ]);
        let n = names(&out.join("checkpoint.ckpt"));
        assert_eq!(has(&n, "param/sem."), sem, "{ablate}");
        assert_eq!(has(&n, "param/afem."), afem, "{ablate}");
        assert_eq!(has(&n, "param/side."), side, "{ablate}");
        assert!(has(&n, "param/app.") && has(&n, "param/cls."), "{ablate}");
    }
}

#[test]
fn eval_reports_are_stable_and_rerank_lambda1_is_plain() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = f.run.join("checkpoint.ckpt");
    let eval = |out: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--profile", "smoke", "--checkpoint", s(&ck), "--data", s(&f.manifest), "--out", s(out)];
        args.extend(extra);
        ok(&args);
        read_json(&out.join("report.json"))
    };
    let a = eval(&dir.path().join("a"), &[]);
    let b = eval(&dir.path().join("b"), &[]);
    assert_eq!(a, b);
    for key in ["mAP", "cmc", "num_query", "num_valid_queries", "per_query_ap", "protocol"] {
        assert!(a.get(key).is_some(), "report lacks {key}");
    }
    let cmc: Vec<f64> = a["cmc"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
    let map = a["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(a, read_json(&f.run.join("report.json")));

    let r = eval(&dir.path().join("r"), &["--rerank", "--set", "eval.rerank.lambda=1"]);
    assert_eq!(r["mAP"], a["mAP"]);
    assert_eq!(r["cmc"], a["cmc"]);

    ok(&["rerank", "--profile", "smoke", "--checkpoint", s(&ck), "--data", s(&f.manifest), "--out", s(&dir.path().join("rr"))]);
    let rr = read_json(&dir.path().join("rr/rerank.json"));
    assert_eq!(rr["plain"]["mAP"], a["mAP"]);
    assert!(rr["reranked"]["mAP"].as_f64().unwrap().is_finite());
}

#[test]
fn ablate_groups_marks_invalid_counts_and_hashes_each_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("groups");
    let table = ok(&[
        "ablate-groups", "--profile", "smoke", "--set", "train.epochs=1", "--data", s(&f.manifest),
        "--out", s(&out), "--groups", "3,4,8",
    ]);
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["valid"], false);
    assert!(rows[0]["reason"].as_str().unwrap().contains("groups"));
    assert!(rows[1]["valid"] == true && rows[2]["valid"] == true);
    let cfg: RunConfig = serde_json::from_value(read_json(&out.join("g4/resolved_config.json"))).unwrap();
    assert_eq!(cfg.model.groups, 4);
    assert_eq!(rows[1]["config_hash"], cfg.hash());
    assert_eq!(table, read_json(&out.join("ablate_groups.json")));
}

#[test]
fn ablate_loss_emits_full_and_baseline_rows() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let table = ok(&[
        "ablate-loss", "--profile", "smoke", "--set", "train.epochs=1", "--data", s(&f.manifest),
        "--out", s(dir.path()),
    ]);
    let names: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["full-supcon", "full-triplet", "baseline-supcon", "baseline-triplet"]);
    assert!(table["rows"].as_array().unwrap().iter().all(|r| r["valid"] == true));
}

#[test]
fn export_writes_one_line_per_selected_image() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = f.run.join("checkpoint.ckpt");
    let all = ok(&["export-embeddings", "--profile", "smoke", "--checkpoint", s(&ck), "--data", s(&f.manifest), "--out", s(&dir.path().join("all"))]);
    assert_eq!(all["records"], 96);
    let text = std::fs::read_to_string(dir.path().join("all/embeddings.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 96);
    let some = ok(&[
        "export-embeddings", "--profile", "smoke", "--checkpoint", s(&ck), "--data", s(&f.manifest),
        "--out", s(&dir.path().join("some")), "--ids", "5",
    ]);
    assert_eq!(some["records"], 30);
    let out = csen(&[
        "export-embeddings", "--profile", "smoke", "--checkpoint", s(&ck), "--data", s(&f.manifest),
        "--out", s(&dir.path().join("bad")), "--split", "holdout",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_clean_and_catches_a_perturbed_backward() {
    let dir = tempfile::tempdir().unwrap();
    let clean = csen(&["verify", "--out", s(dir.path())]);
    assert!(clean.status.success(), "{}", stderr(&clean));
    let report = read_json(&dir.path().join("verify.json"));
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));

    let bad = csen(&["verify", "--perturb", "group_gate:1.5"]);
    assert_eq!(bad.status.code(), Some(1));
    let err = stderr(&bad);
    assert!(err.contains("FAIL grad:group_gate"), "{err}");
    assert!(err.contains("verification failed"));

    assert_eq!(csen(&["verify", "--perturb", "nonsense:2"]).status.code(), Some(2));
}
