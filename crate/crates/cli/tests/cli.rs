use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use warpadv_core::adversary::ParamBounds;
use warpadv_core::data::{load_tensor, DatasetManifest, Split, MANIFEST_FILE};
use warpadv_core::diff::Tensor;
use warpadv_core::geometry::TransformParams;
use warpadv_core::losses::{angular_loss, LossConfig};
use warpadv_core::model::load_checkpoint;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_warpadv"));
    c.env_remove("DARFACE_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().unwrap()
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "{cmd:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_data(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let data = dir.join(name);
    ok(bin()
        .args([
            "gen-data",
            "--identities",
            "4",
            "--samples-per-id",
            "6",
            "--seed",
            seed,
            "--out",
        ])
        .arg(&data));
    data
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = gen_data(dir, "data", "1");
    let out = dir.join("run");
    ok(bin()
        .args(["train", "--epochs", "1", "--batch-size", "5", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out));
    (data, out.join("checkpoints/final"))
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path(), "a", "4");
    let b = gen_data(dir.path(), "b", "4");
    let c = gen_data(dir.path(), "c", "5");
    let m = DatasetManifest::load(&a).unwrap();
    assert_eq!(m.records.len(), 24);
    for r in &m.records {
        assert_eq!(fs::read(a.join(&r.path)).unwrap(), fs::read(b.join(&r.path)).unwrap());
    }
    assert_eq!(
        fs::read(a.join(MANIFEST_FILE)).unwrap(),
        fs::read(b.join(MANIFEST_FILE)).unwrap()
    );
    assert_ne!(
        fs::read(a.join(MANIFEST_FILE)).unwrap(),
        fs::read(c.join(MANIFEST_FILE)).unwrap()
    );
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flag = gen_data(dir.path(), "flag", "7");
    let env = dir.path().join("env");
    ok(bin()
        .env("DARFACE_SEED", "7")
        .args(["gen-data", "--identities", "4", "--samples-per-id", "6", "--out"])
        .arg(&env));
    assert_eq!(
        fs::read(flag.join(MANIFEST_FILE)).unwrap(),
        fs::read(env.join(MANIFEST_FILE)).unwrap()
    );
    let bad = run(bin()
        .env("DARFACE_SEED", "seven")
        .args(["gen-data", "--out"])
        .arg(dir.path().join("bad")));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let out = run(bin().args(["train", "--bogus"]));
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "data", "1");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = run(bin()
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run"))
        .arg("--config")
        .arg(&cfg));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["train", "--data"])
        .arg(dir.path().join("nowhere"))
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergent_training_aborts_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "data", "1");
    let out = run(bin()
        .args(["train", "--epochs", "2", "--batch-size", "5", "--lr", "1e30", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn gradcheck_filters_and_reports_faults() {
    let out = ok(bin().args(["gradcheck", "--primitive", "conv2d", "--samples", "5", "--json"]));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let checks = v.as_array().unwrap();
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0]["name"], "conv2d");
    assert_eq!(checks[0]["pass"], true);

    let out = run(bin().args([
        "gradcheck",
        "--primitive",
        "mul",
        "--samples",
        "3",
        "--inject-fault",
        "mul",
    ]));
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mul"));

    let out = run(bin().args(["gradcheck", "--primitive", "no-such-op"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_is_deterministic_and_leaves_checkpoint_alone() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    let before = load_checkpoint(&ck).unwrap().0.hash();
    let mut metrics = Vec::new();
    for name in ["e1", "e2"] {
        let out = dir.path().join(name);
        ok(bin()
            .args(["eval", "--degrade", "none,16,8", "--checkpoint"])
            .arg(&ck)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out));
        metrics.push((
            fs::read(out.join("metrics.json")).unwrap(),
            fs::read(out.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(metrics[0], metrics[1]);
    let csv = String::from_utf8(metrics[0].1.clone()).unwrap();
    assert!(csv.starts_with("degrade,metric,value\n"));
    for level in ["none,rank1,", "16,rank1,", "8,rank1,"] {
        assert!(csv.lines().any(|l| l.starts_with(level)), "{csv}");
    }
    assert_eq!(load_checkpoint(&ck).unwrap().0.hash(), before);
}

fn demo(dir: &Path, ck: &Path, image: &Path, steps: &str, out: &str) -> Vec<serde_json::Value> {
    let out_dir = dir.join(out);
    let o = ok(bin()
        .args([
            "search-demo",
            "--label",
            "2",
            "--seed",
            "3",
            "--steps",
            steps,
            "--checkpoint",
        ])
        .arg(ck)
        .arg("--image")
        .arg(image)
        .arg("--out")
        .arg(&out_dir));
    let printed: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let saved: Vec<serde_json::Value> = fs::read_to_string(out_dir.join("trajectory.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(printed, saved);
    printed
}

#[test]
fn search_demo_trajectory_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    let m = DatasetManifest::load(&data).unwrap();
    let rec = m
        .records
        .iter()
        .find(|r| r.split == Split::Test && r.identity == 2)
        .unwrap();
    let image = m.path_of(rec);

    assert_eq!(demo(dir.path(), &ck, &image, "0", "zero").len(), 1);

    let recs = demo(dir.path(), &ck, &image, "3", "three");
    assert_eq!(recs.len(), 4);
    let (model, _) = load_checkpoint(&ck).unwrap();
    let model = model.cast::<f64>();
    let loss = LossConfig::default();
    let bounds = ParamBounds::default();
    for (k, r) in recs.iter().enumerate() {
        assert_eq!(r["step"], k);
        let p: TransformParams = serde_json::from_value(r["params"].clone()).unwrap();
        assert!(bounds.contains(&p), "{p:?}");
        let warped: Tensor<f64> = load_tensor(&dir.path().join("three").join(r["image"].as_str().unwrap())).unwrap();
        let e = model.forward(&warped).unwrap();
        let l = angular_loss(&model.cosine_logits(e.data()), 1, loss.margin, loss.scale).unwrap();
        let logged = r["loss"].as_f64().unwrap();
        assert!((l - logged).abs() < 1e-5, "step {k}: {l} vs {logged}");
        assert!(dir.path().join("three").join(r["field"].as_str().unwrap()).exists());
    }

    let out = run(bin()
        .args(["search-demo", "--label", "9", "--checkpoint"])
        .arg(&ck)
        .arg("--image")
        .arg(&image)
        .arg("--out")
        .arg(dir.path().join("bad")));
    assert_eq!(out.status.code(), Some(2));
}
