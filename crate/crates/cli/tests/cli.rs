use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_affordkd"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "affordkd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

/// gen-data, gen-textbank, gen-teacher in `dir`.
fn inputs(dir: &Path) {
    run(dir, &["gen-data", "--num-clouds", "4", "--points", "64", "--partial-view", "--seed", "3", "--out", "data"]);
    run(dir, &["gen-textbank", "--data", "data", "--seed", "4", "--out", "tb"]);
    run(dir, &["gen-teacher", "--seed", "5", "--out", "teacher.ckpt"]);
}

fn train_eval(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    run(dir, &["train", "--data", "data", "--textbank", "tb", "--teacher", "teacher.ckpt", "--epochs", "2", "--out", "run"]);
    let eval = run(dir, &["eval", "--data", "data", "--textbank", "tb", "--ckpt", "run/student.ckpt"]);
    (
        std::fs::read(dir.join("run/student.ckpt")).unwrap(),
        std::fs::read(dir.join("run/train_report.jsonl")).unwrap(),
        eval.stdout,
    )
}

#[test]
fn chain_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    inputs(a.path());
    inputs(b.path());
    for f in ["data/manifest.json", "tb/textbank.bin", "teacher.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(train_eval(a.path()), train_eval(b.path()));

    let report = String::from_utf8(std::fs::read(a.path().join("run/train_report.jsonl")).unwrap()).unwrap();
    assert_eq!(report.lines().count(), 2);
    let eval: serde_json::Value = serde_json::from_slice(&train_eval(a.path()).2).unwrap();
    for key in ["miou", "acc", "macc"] {
        let v = eval["metrics"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(eval["config"].is_object());
}

#[test]
fn inputs_are_not_mutated_by_training() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path());
    let files = ["data/manifest.json", "tb/textbank.bin", "tb/textbank.json", "teacher.ckpt"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    train_eval(dir.path());
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn predict_uses_only_the_requested_labels() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path());
    run(dir.path(), &["train", "--data", "data", "--textbank", "tb", "--teacher", "teacher.ckpt", "--epochs", "1", "--out", "run"]);
    let out = run(
        dir.path(),
        &["predict", "--data", "data", "--textbank", "tb", "--ckpt", "run/student.ckpt", "--labels", "grasp,cut"],
    );
    let v = json(&out);
    assert_eq!(v["label_set"], serde_json::json!(["grasp", "cut"]));
    let clouds = v["clouds"].as_array().unwrap();
    assert_eq!(clouds.len(), 4);
    for c in clouds {
        for l in c["labels"].as_array().unwrap() {
            assert!(l == "grasp" || l == "cut", "{l}");
        }
    }

    let bad = bin()
        .current_dir(dir.path())
        .args(["predict", "--data", "data", "--textbank", "tb", "--ckpt", "run/student.ckpt", "--labels", "fly"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_the_reference_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gradcheck", "--preset", "desk", "--seed", "7"]);
    let v = json(&out);
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["terms"].as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("PASS"));
}

#[test]
fn dump_embeddings_sizes_match_manifest() {
    let dir = tempfile::tempdir().unwrap();
    inputs(dir.path());
    let v = json(&run(dir.path(), &["dump-embeddings", "--data", "data", "--ckpt", "teacher.ckpt", "--out", "emb"]));
    let rows = v["rows"].as_u64().unwrap() as usize;
    let dim = v["dim"].as_u64().unwrap() as usize;
    assert_eq!(rows, 4 * 64);
    assert_eq!(std::fs::metadata(dir.path().join("emb/embeddings.bin")).unwrap().len() as usize, rows * dim * 4);
    assert_eq!(std::fs::metadata(dir.path().join("emb/labels.bin")).unwrap().len() as usize, rows * 2);
}

#[test]
fn textbank_groups_are_parsed_per_flag() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&run(
        dir.path(),
        &["gen-textbank", "--labels", "grasp,hold,cut,slice", "--group", "grasp,hold", "--group", "cut,slice", "--dim", "64", "--out", "tb"],
    ));
    assert_eq!(v["groups"], serde_json::json!([["grasp", "hold"], ["cut", "slice"]]));
    assert_eq!(v["dim"], 64);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let usage = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let missing = bin().arg("train").output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let runtime = bin()
        .current_dir(dir.path())
        .args(["eval", "--data", "absent", "--textbank", "absent", "--ckpt", "absent"])
        .output()
        .unwrap();
    assert_eq!(runtime.status.code(), Some(2));
    assert!(runtime.stdout.is_empty());
}

#[test]
fn every_subcommand_help_lists_both_presets() {
    for sub in [
        "gen-data",
        "gen-textbank",
        "gen-teacher",
        "train",
        "eval",
        "predict",
        "gradcheck",
        "dump-embeddings",
        "ablate",
    ] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("desk") && text.contains("paper"), "{sub}");
        assert!(text.contains("2048") && text.contains("512"), "{sub}");
    }
}
