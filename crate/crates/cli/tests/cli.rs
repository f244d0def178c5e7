use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use slv_core::verify::{toy_config, toy_gen_config};

fn slv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slv"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("slv runs")
}

fn slv_threads(args: &[&str], dir: &Path, threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slv"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("SLV_THREADS", threads)
        .output()
        .expect("slv runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", text(o));
}

/// Toy geometry config and generator files in `dir`.
fn toy_files(dir: &Path, steps: usize) {
    let mut c = toy_config();
    c.train.lr = 1e-3;
    c.train.batch = 2;
    c.train.accum = 1;
    c.train.warmup = 1;
    c.train.total_steps = steps;
    fs::write(dir.join("c.json"), c.to_json()).unwrap();
    fs::write(dir.join("gen.json"), serde_json::to_string(&toy_gen_config()).unwrap()).unwrap();
}

fn toy_data(dir: &Path) {
    ok(&slv(
        &["gen-data", "--seed", "3", "--out", "d", "--train", "4", "--seen", "2", "--unseen", "2", "--null", "2", "--gen-config", "gen.json"],
        dir,
    ));
}

#[test]
fn gen_data_writes_36_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = slv(
        &["gen-data", "--seed", "7", "--out", "d", "--train", "16", "--seen", "8", "--unseen", "8", "--null", "4"],
        dir.path(),
    );
    ok(&o);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 36);
    assert!(dir.path().join("d/vocab.txt").exists());
}

#[test]
fn train_eval_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_files(p, 4);
    toy_data(p);
    ok(&slv(&["train", "--config", "c.json", "--data", "d", "--out", "m.slv1"], p));
    for f in ["m.slv1", "m.slv1.json", "m.slv1.log.csv", "m.slv1.run.json"] {
        assert!(p.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(p.join("m.slv1.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert_eq!(log.lines().next(), Some("step,lr,loss"));

    let o = slv(
        &["eval", "--ckpt", "m.slv1", "--data", "d", "--splits", "seen,unseen,null", "--report", "r.csv", "--json", "r.json", "--dump-masks", "pred"],
        p,
    );
    ok(&o);
    let report = fs::read_to_string(p.join("r.csv")).unwrap();
    assert_eq!(
        report.lines().next(),
        Some("seen_J,seen_F,seen_JF,unseen_J,unseen_F,unseen_JF,mix_J,mix_F,mix_JF,null_S")
    );
    assert_eq!(report.lines().count(), 2);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(p.join("r.json")).unwrap()).unwrap();
    assert!(json["seen"]["jf"].is_number());

    ok(&slv(&["render-overlays", "--data", "d", "--predictions", "pred", "--out", "ov"], p));
    let overlays: usize = fs::read_dir(p.join("ov"))
        .unwrap()
        .map(|e| fs::read_dir(e.unwrap().path()).unwrap().count())
        .sum();
    // 6 evaluated videos of 2 frames each.
    assert_eq!(overlays, 12);
}

#[test]
fn seen_only_report_omits_other_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_files(p, 2);
    toy_data(p);
    ok(&slv(&["train", "--config", "c.json", "--data", "d", "--out", "m.slv1"], p));
    ok(&slv(&["eval", "--ckpt", "m.slv1", "--data", "d", "--splits", "seen", "--report", "r.csv"], p));
    let report = fs::read_to_string(p.join("r.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("seen_J,seen_F,seen_JF"));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_files(p, 3);
    toy_data(p);
    for t in ["1", "2"] {
        let ckpt = format!("m{t}.slv1");
        ok(&slv_threads(&["train", "--config", "c.json", "--data", "d", "--out", &ckpt], p, t));
        ok(&slv_threads(&["eval", "--ckpt", &ckpt, "--data", "d", "--report", &format!("r{t}.csv")], p, t));
    }
    for (a, b) in [("m1.slv1", "m2.slv1"), ("m1.slv1.log.csv", "m2.slv1.log.csv"), ("r1.csv", "r2.csv")] {
        assert_eq!(fs::read(p.join(a)).unwrap(), fs::read(p.join(b)).unwrap(), "{a} vs {b}");
    }
}

#[test]
fn ablate_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_files(p, 2);
    toy_data(p);
    ok(&slv(
        &["ablate", "--axis", "strategy", "--values", "learnable-token,mean", "--config", "c.json", "--data", "d", "--out", "ab.csv"],
        p,
    ));
    let csv = fs::read_to_string(p.join("ab.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("axis,value,seen_J"));
    assert!(lines[1].starts_with("strategy,learnable-token,"));
    assert!(lines[2].starts_with("strategy,mean,"));
    assert!(p.join("ab.csv.runs").is_dir());
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = slv(&["train", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("Usage"));
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = slv(&["eval", "--ckpt", "nope.slv1", "--data", "d", "--report", "r.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = slv(&["train", "--data", "nowhere", "--out", "m.slv1"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let o = slv(&["train", "--config", "c.json", "--data", "d", "--out", "m.slv1"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let o = slv(&["ablate", "--axis", "depth", "--values", "1", "--data", "d", "--out", "a.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    toy_files(p, 2);
    toy_data(p);
    ok(&slv(&["train", "--config", "c.json", "--data", "d", "--out", "m.slv1"], p));
    let mut bytes = fs::read(p.join("m.slv1")).unwrap();
    bytes[0] = b'X';
    fs::write(p.join("m.slv1"), bytes).unwrap();
    let o = slv(&["eval", "--ckpt", "m.slv1", "--data", "d", "--report", "r.csv"], p);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("magic"));
}

#[test]
fn gradcheck_passes_and_reports_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = slv(&["gradcheck", "--scope", "ops"], dir.path());
    ok(&o);
    assert!(text(&o).contains("all gradients match"));

    let o = slv(&["gradcheck", "--scope", "ops", "--inject-fault", "softmax"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let out = text(&o);
    assert!(out.contains("gradient mismatch in ops: softmax"), "{out}");
    assert!(out.contains("gradient check FAILED"));
}
