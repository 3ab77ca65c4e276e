use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wildssl::tiling::{read_manifest, Label, Split};

fn wildssl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wildssl"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wildssl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failing(dir: &Path, args: &[&str]) -> String {
    let out = wildssl(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small frames, a desk-scale pretraining set and a 1/4 downstream set.
fn fixture() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--frames", "12", "--width", "160", "--height", "160", "--animals", "4", "--seed", "3", "--out", "frames"]);
    ok(d, &["tile", "--desk", "--input", "frames", "--per-frame", "8", "--out", "pre"]);
    ok(d, &["build-downstream", "--desk", "--input", "frames", "--ratio", "4", "--out", "down"]);
    fs::write(
        d.join("run.toml"),
        r#"preset = "geocld"
desk = true
frames = "frames"
pretrain_manifest = "pre/manifest.csv"
downstream_manifest = "down/manifest.csv"
epochs = 2
batch_size = 16
queue_size = 32
hidden_dim = 32
checkpoint_every = 6
[cld]
k = 4
[knn]
k = 5
[probe]
epochs = 20
"#,
    )
    .unwrap();
    tmp
}

#[test]
fn synth_twice_gives_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--frames", "20", "--seed", "7", "--out", "a"]);
    ok(d, &["synth", "--frames", "20", "--seed", "7", "--out", "b"]);
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    assert_eq!(a.len(), 21);
    assert_eq!(a, b);
}

#[test]
fn tile_reports_patch_count() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--frames", "10", "--width", "300", "--height", "300", "--out", "frames"]);
    let out = ok(d, &["tile", "--input", "frames", "--size", "256", "--per-frame", "4", "--out", "pre"]);
    assert!(out.starts_with("40 patches"), "{out}");
    let m = read_manifest(&d.join("pre/manifest.csv")).unwrap();
    assert_eq!(m.records.len(), 40);
    assert!(m.records.iter().all(|r| r.split == Split::Pretrain && r.label == Label::Unlabeled));
}

#[test]
fn downstream_ratio_recounts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--frames", "20", "--animals", "4", "--seed", "1", "--out", "frames"]);
    let out = ok(d, &["build-downstream", "--desk", "--input", "frames", "--ratio", "18", "--out", "down"]);
    let m = read_manifest(&d.join("down/manifest.csv")).unwrap();
    let fg = m.count(Split::Train, Label::Foreground);
    let bg = m.count(Split::Train, Label::Background);
    assert!(fg > 0);
    assert_eq!(bg, 18 * fg);
    assert!(out.contains("train ratio 1/18.00"), "{out}");
}

fn echo(d: &Path, preset: &str, run: &str) -> toml::Table {
    fs::write(d.join(format!("{preset}.toml")), format!("preset = \"{preset}\"\n")).unwrap();
    ok(d, &["pretrain", "--config", &format!("{preset}.toml"), "--dry-run", "--out", run]);
    fs::read_to_string(d.join(run).join("config.toml")).unwrap().parse().unwrap()
}

#[test]
fn preset_defaults_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let geocld = echo(d, "geocld", "g");
    assert_eq!(geocld["cld"]["lambda"].as_float(), Some(0.25));
    assert_eq!(geocld["cld"]["k"].as_integer(), Some(32));
    let mixco = echo(d, "mixco", "m");
    assert_eq!(mixco["mix"]["gamma"].as_float(), Some(0.9));
    assert_eq!(mixco["mix"]["p"].as_float(), Some(0.3));
    assert_eq!(mixco["mix"]["alpha"].as_float(), Some(1.0));
    assert_eq!(mixco["preset"].as_str(), Some("mixco"));
}

#[test]
fn flags_and_environment_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), "preset = \"mixco\"\nepochs = 9\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wildssl"))
        .current_dir(d)
        .args(["pretrain", "--config", "c.toml", "--dry-run", "--gamma", "0.5", "--beta", "2", "--out", "r"])
        .env("WILDSSL_EPOCHS", "3")
        .env("WILDSSL_MIX__P", "0.1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t: toml::Table = fs::read_to_string(d.join("r/config.toml")).unwrap().parse().unwrap();
    assert_eq!(t["epochs"].as_integer(), Some(3));
    assert_eq!(t["mix"]["gamma"].as_float(), Some(0.5));
    assert_eq!(t["mix"]["p"].as_float(), Some(0.1));
    assert_eq!(t["mix"]["alpha"].as_float(), Some(2.0));
}

#[test]
fn invalid_keys_fail_with_their_names() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "preset = \"moco_v2\"\ntaus = 0.2\n[cld]\nclusters = 4\n").unwrap();
    let err = failing(d, &["pretrain", "--config", "bad.toml", "--dry-run", "--out", "r"]);
    assert!(err.contains("`taus`") && err.contains("`cld.clusters`"), "{err}");
    assert!(!d.join("r").exists());
    fs::write(d.join("zero.toml"), "epochs = 0\n").unwrap();
    let err = failing(d, &["pretrain", "--config", "zero.toml", "--dry-run", "--out", "r"]);
    assert!(err.contains("epochs"), "{err}");
}

#[test]
fn runtime_errors_exit_nonzero() {
    let tmp = fixture();
    let d = tmp.path();
    let err = failing(d, &["probe", "--config", "run.toml", "--checkpoint", "missing.bin", "--out", "res"]);
    assert!(err.contains("missing.bin"), "{err}");
    failing(d, &["synth", "--frames", "2"]);
    failing(d, &["tile", "--input", "nowhere", "--out", "x"]);
    // run directories are never reused
    failing(d, &["pretrain", "--config", "run.toml", "--dry-run", "--out", "frames"]);
    let clap = wildssl(d, &["no-such-command"]);
    assert!(!clap.status.success());
}

#[test]
fn pretrain_is_deterministic_and_reproducible_from_its_echo() {
    let tmp = fixture();
    let d = tmp.path();
    ok(d, &["pretrain", "--config", "run.toml", "--out", "runs/a"]);
    ok(d, &["pretrain", "--config", "run.toml", "--out", "runs/b"]);
    ok(d, &["pretrain", "--config", "runs/a/config.toml", "--out", "runs/c"]);
    let metrics = |r: &str| fs::read(d.join("runs").join(r).join("metrics.csv")).unwrap();
    assert_eq!(metrics("a"), metrics("b"));
    assert_eq!(metrics("a"), metrics("c"));
    assert_eq!(tree(&d.join("runs/a")), tree(&d.join("runs/b")));

    // resume halfway into a fresh directory
    ok(d, &["pretrain", "--config", "run.toml", "--resume", "runs/a/ckpt_6.bin", "--out", "runs/r"]);
    assert_eq!(metrics("a"), metrics("r"));
    assert_eq!(
        fs::read(d.join("runs/a/ckpt_12.bin")).unwrap(),
        fs::read(d.join("runs/r/ckpt_12.bin")).unwrap()
    );
}

#[test]
fn evaluation_and_report() {
    let tmp = fixture();
    let d = tmp.path();
    ok(d, &["pretrain", "--config", "run.toml", "--out", "runs/a"]);
    ok(d, &["pretrain", "--config", "run.toml", "--seed", "1", "--out", "runs/b"]);
    ok(d, &["probe", "--config", "run.toml", "--checkpoint", "runs/a/ckpt_12.bin", "--fraction", "0.1", "--out", "res"]);
    ok(d, &["finetune", "--config", "run.toml", "--checkpoint", "runs/b/ckpt_12.bin", "--epochs", "1", "--batch-size", "16", "--run-id", "ft", "--out", "res"]);
    let knn = ok(d, &["knn", "--config", "run.toml", "--checkpoint", "runs/a/ckpt_12.bin", "--k", "5", "--split", "val"]);
    assert!(knn.starts_with("kNN top-1 on val"), "{knn}");

    let results = fs::read_to_string(d.join("res/results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "run_id,mode,fraction,top1,prec_fg,rec_fg");
    assert!(lines[1].starts_with("a_frozen_0.1,frozen,0.1,"), "{results}");
    assert!(lines[2].starts_with("ft,end_to_end,1.0,"), "{results}");
    let preds = fs::read_to_string(d.join("res/preds_ft.csv")).unwrap();
    let test_size = read_manifest(&d.join("down/manifest.csv")).unwrap().records_in(Split::Test).count();
    assert_eq!(preds.lines().count(), test_size + 1);

    ok(d, &["report", "--runs", "runs/a", "runs/b", "--results", "res/results.csv", "--out", "rep"]);
    let svg = fs::read_to_string(d.join("rep/loss.svg")).unwrap();
    let series = svg
        .split("<polyline")
        .skip(1)
        .filter(|tag| tag.split('>').next().unwrap().contains("stroke-width=\"2\""))
        .count();
    assert_eq!(series, 2, "one curve per run");
    assert!(d.join("rep/knn.svg").exists());
    let table = fs::read_to_string(d.join("rep/table.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("run_id,mode,fraction,Acc,Prec,Rec"));
    assert_eq!(table.lines().count(), 3);
}
