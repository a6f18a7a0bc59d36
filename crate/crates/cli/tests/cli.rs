use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixflow_core::trainer::Checkpoint;
use serde_json::Value;
use tempfile::TempDir;

fn mixflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixflow"))
        .args(args)
        .env_remove("MIXFLOW_SEED")
        .env_remove("MIXFLOW_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mixflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = mixflow(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two letters, four rotations, 40 points per condition.
fn small_data(dir: &Path) {
    ok(&[
        "gen-data", "--letters", "AS", "--rotations", "4", "--val-letter", "S", "--copies", "2",
        "--samples", "20", "--seed", "3", "--out", p(dir),
    ]);
}

const FAST: [&str; 12] = [
    "--trainer.batch_size", "16",
    "--velocity.hidden", "[8]",
    "--base.net.hidden", "[4]",
    "--integrator.steps", "5",
    "--validation.samples", "20",
    "--trainer.epochs", "1",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(extra);
    args.extend_from_slice(&FAST);
    ok(&args)
}

#[test]
fn gen_data_writes_layout_and_counts() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    let out = ok(&[
        "gen-data", "--letters", "AS", "--rotations", "4", "--val-letter", "S", "--samples", "5",
        "--copies", "1", "--out", p(&d),
    ]);
    assert!(out.contains("train: 4 conditions"));
    assert!(out.contains("val: 2 conditions"));
    assert!(d.join("data.csv").exists() && d.join("manifest.json").exists());
    let (c, err) = code(&["gen-data", "--letters", "AS", "--val-letter", "Q", "--out", p(&d)]);
    assert_eq!(c, 2, "{err}");
}

#[test]
fn zero_epoch_training_writes_initial_checkpoint() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    let r = t.path().join("r");
    ok(&["train", "--data", p(&d), "--out", p(&r), "--trainer.epochs", "0"]);
    let log = fs::read_to_string(r.join("metrics.csv")).unwrap();
    assert_eq!(log.trim(), "epoch,condition_id,mmd,w1,w2,ed");
    let best = Checkpoint::load(&r.join("best.json")).unwrap();
    assert_eq!(best.epoch, 0);
    assert_eq!(best, Checkpoint::load(&r.join("last.json")).unwrap());
}

#[test]
fn training_is_repeatable_for_both_models() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    for model in ["mixflow", "cfm"] {
        let a = t.path().join(format!("{model}_a"));
        let b = t.path().join(format!("{model}_b"));
        let out = train(&d, &a, &["--model", model]);
        assert!(out.contains("best validation W2"), "{out}");
        train(&d, &b, &["--model", model]);
        let la = fs::read(a.join("metrics.csv")).unwrap();
        assert_eq!(la, fs::read(b.join("metrics.csv")).unwrap());
        let mut r = csv::Reader::from_reader(la.as_slice());
        assert_eq!(r.records().count(), 2);
        let mut ca = Checkpoint::load(&a.join("best.json")).unwrap();
        let mut cb = Checkpoint::load(&b.join("best.json")).unwrap();
        assert_ne!(ca.config.checkpoint_dir, cb.config.checkpoint_dir);
        ca.config.checkpoint_dir = None;
        cb.config.checkpoint_dir = None;
        assert_eq!(ca, cb);
    }
}

#[test]
fn seed_env_and_overrides_reach_the_config() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    let r = t.path().join("r");
    let out = Command::new(env!("CARGO_BIN_EXE_mixflow"))
        .args(["train", "--data", p(&d), "--out", p(&r), "--set", "trainer.lr=0.004"])
        .args(FAST)
        .env("MIXFLOW_SEED", "17")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: Value = serde_json::from_str(&fs::read_to_string(r.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 17);
    assert_eq!(cfg["trainer"]["lr"], 0.004);
}

#[test]
fn config_problems_are_listed_before_training() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    let r = t.path().join("r");
    let (c, err) = code(&[
        "train", "--data", p(&d), "--out", p(&r), "--trainer.lr", "-1", "--base.sigma2", "0",
    ]);
    assert_eq!(c, 2);
    assert!(err.contains("trainer.lr") && err.contains("base.sigma2"), "{err}");
    assert!(!r.join("metrics.csv").exists());
    let (c, err) = code(&["train", "--data", p(&d), "--out", p(&r), "--trainer.bogus", "1"]);
    assert_eq!(c, 2);
    assert!(err.contains("trainer.bogus"), "{err}");
    let (c, _) = code(&["train", "--data", p(&t.path().join("missing")), "--out", p(&r)]);
    assert_eq!(c, 4);
}

#[test]
fn sampling_snapshots_and_determinism() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    let r = t.path().join("r");
    train(&d, &r, &[]);
    let ck = r.join("best.json");
    let s1 = t.path().join("s1");
    let s2 = t.path().join("s2");
    for s in [&s1, &s2] {
        ok(&[
            "sample", "--checkpoint", p(&ck), "--descriptor", "S_r01", "--data", p(&d), "--n", "30",
            "--t-snapshots", "0,0.5,1", "--seed", "5", "--out", p(s),
        ]);
    }
    for f in ["t0.csv", "t0.5.csv", "t1.csv"] {
        assert_eq!(fs::read(s1.join(f)).unwrap(), fs::read(s2.join(f)).unwrap());
    }
    let (c, err) = code(&[
        "sample", "--checkpoint", p(&ck), "--descriptor", "[0.0, 1.0]", "--out", p(&s1),
    ]);
    assert_eq!(c, 2);
    assert!(err.contains("descriptor"), "{err}");
}

#[test]
fn zero_velocity_leaves_base_samples_in_place() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    let r = t.path().join("r");
    ok(&["train", "--data", p(&d), "--out", p(&r), "--trainer.epochs", "0"]);
    let mut ck = Checkpoint::load(&r.join("best.json")).unwrap();
    for w in &mut ck.velocity.net.weights {
        w.fill(0.0);
    }
    for b in &mut ck.velocity.net.biases {
        b.fill(0.0);
    }
    let zero = t.path().join("zero.json");
    ck.save(&zero).unwrap();
    let s = t.path().join("s");
    ok(&[
        "sample", "--checkpoint", p(&zero), "--descriptor", "A_r00", "--data", p(&d), "--n", "25",
        "--t-snapshots", "0,1", "--out", p(&s),
    ]);
    assert_eq!(fs::read(s.join("t0.csv")).unwrap(), fs::read(s.join("t1.csv")).unwrap());
}

#[test]
fn eval_aggregate_matches_per_condition_rows() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    let r = t.path().join("r");
    train(&d, &r, &[]);
    let e = t.path().join("e");
    ok(&[
        "eval", "--checkpoint", p(&r.join("best.json")), "--data", p(&d), "--split", "val",
        "--samples", "20", "--out", p(&e),
    ]);
    let agg: Value = serde_json::from_str(&fs::read_to_string(e.join("aggregate.json")).unwrap()).unwrap();
    let mut rd = csv::Reader::from_path(e.join("per_condition.csv")).unwrap();
    let headers = rd.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for metric in ["mmd", "w1", "w2", "ed"] {
        let k = headers.iter().position(|h| h == metric).unwrap();
        let vals: Vec<f64> = rows.iter().map(|r| r[k].parse().unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - agg[metric]["mean"].as_f64().unwrap()).abs() < 1e-12);
    }
    let only_s = t.path().join("s");
    ok(&["gen-data", "--letters", "S", "--rotations", "4", "--samples", "5", "--copies", "1", "--out", p(&only_s)]);
    let (c, err) = code(&[
        "eval", "--checkpoint", p(&r.join("best.json")), "--data", p(&only_s), "--split", "holdout",
        "--out", p(&e),
    ]);
    assert_eq!(c, 2);
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn theory_reports() {
    let t = TempDir::new().unwrap();
    let a = t.path().join("a.json");
    let b = t.path().join("b.json");
    for f in [&a, &b] {
        ok(&["theory", "--random", "--I", "2", "--J", "5", "--D", "3", "--seed", "4", "--out", p(f)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let rep: Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    let dof = rep["dof"].as_array().unwrap();
    assert!(!dof.is_empty());
    assert!(dof.iter().all(|e| e["paper_dof"] == -1 && e["rank"].is_u64()));

    let out = ok(&["theory", "--random", "--I", "1", "--J", "4", "--D", "2", "--checks", "illposed"]);
    let rep: Value = serde_json::from_str(&out).unwrap();
    assert!(rep["illposed"]["z1_coefficient"].as_f64().unwrap().abs() < 1e-12);

    let (c, err) = code(&["theory", "--random", "--I", "2", "--J", "21", "--D", "2"]);
    assert_eq!(c, 2);
    assert!(err.contains("cap"), "{err}");

    let inst = t.path().join("inst.json");
    fs::write(
        &inst,
        r#"{"gamma":[[0.0],[1.0],[3.0]],"q_list":[[0.2,0.3,0.5],[0.5,0.25,0.25]],"y_list":[[0.0],[1.0]],"I":1}"#,
    )
    .unwrap();
    ok(&["theory", "--instance", p(&inst), "--checks", "duality,projection"]);
}

#[test]
fn plot_geometry_and_xml() {
    let t = TempDir::new().unwrap();
    let one = t.path().join("one.csv");
    fs::write(&one, "f0,f1\n0,0\n").unwrap();
    let svg1 = t.path().join("one.svg");
    ok(&["plot", "--points", p(&one), "--out", p(&svg1)]);
    let text = fs::read_to_string(&svg1).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let circles: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("circle")).collect();
    assert_eq!(circles.len(), 1);
    let root = doc.root_element();
    let w: f64 = root.attribute("width").unwrap().parse().unwrap();
    let h: f64 = root.attribute("height").unwrap().parse().unwrap();
    let cx: f64 = circles[0].attribute("cx").unwrap().parse().unwrap();
    let cy: f64 = circles[0].attribute("cy").unwrap().parse().unwrap();
    assert_eq!((cx, cy), (w / 2.0, h / 2.0));
    let r: f64 = circles[0].attribute("r").unwrap().parse().unwrap();
    assert!((r - 0.008 * h).abs() < 1e-12);

    let other = t.path().join("other.csv");
    fs::write(&other, "condition_id,f0,f1\nx,0.5,-0.5\nx,1,1\n").unwrap();
    let svg2 = t.path().join("two.svg");
    ok(&["plot", "--points", p(&one), p(&other), "--labels", "first,second", "--out", p(&svg2)]);
    let text2 = fs::read_to_string(&svg2).unwrap();
    let doc2 = roxmltree::Document::parse(&text2).unwrap();
    let w2: f64 = doc2.root_element().attribute("width").unwrap().parse().unwrap();
    assert_eq!(w2, 2.0 * w);
    let labels: Vec<&str> = doc2.descendants().filter(|n| n.has_tag_name("text")).filter_map(|n| n.text()).collect();
    assert_eq!(labels, vec!["first", "second"]);

    let wide = t.path().join("wide.csv");
    fs::write(&wide, "f0,f1,f2\n0,0,0\n").unwrap();
    let (c, err) = code(&["plot", "--points", p(&wide), "--out", p(&t.path().join("w.svg"))]);
    assert_eq!(c, 2);
    assert!(err.contains("pca"), "{err}");
}

#[test]
fn thread_cap_does_not_change_results() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    small_data(&d);
    let mut logs = Vec::new();
    for threads in ["1", "3"] {
        let r = t.path().join(format!("r{threads}"));
        let out = Command::new(env!("CARGO_BIN_EXE_mixflow"))
            .args(["train", "--data", p(&d), "--out", p(&r)])
            .args(FAST)
            .env("MIXFLOW_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        logs.push(fs::read(r.join("metrics.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let out = Command::new(env!("CARGO_BIN_EXE_mixflow"))
        .args(["theory", "--random"])
        .env("MIXFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
