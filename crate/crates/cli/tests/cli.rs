use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn drmime(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drmime"))
        .current_dir(dir)
        .env_remove("DRMIME_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = drmime(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn naed_mean(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.starts_with("NAED")).expect("NAED line");
    line.split_whitespace()
        .find_map(|t| t.strip_prefix("mean="))
        .unwrap()
        .parse()
        .unwrap()
}

/// 64x64 pattern plus a moving image shifted by `tx`, with landmarks and truth.
fn fixture(tx: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_path_buf();
    ok(
        &p,
        &[
            "synth", "--pattern", "64x64", "--out-fixed", "f.png", "--tx", tx, "--out-moving", "m.png",
            "--out-landmarks", "lm.csv", "--out-truth", "truth.json",
        ],
    );
    (dir, p)
}

#[test]
fn usage_errors_exit_2() {
    let (_d, p) = fixture("0.05");
    let reg = ["register", "--fixed", "f.png", "--moving", "m.png", "--out", "r.json"];
    for extra in [&["--iters", "0"][..], &["--bogus"], &["--metric", "ssd"], &["--sample-frac", "2"]] {
        let args: Vec<&str> = reg.iter().chain(extra).copied().collect();
        assert_eq!(drmime(&p, &args).status.code(), Some(2), "{extra:?}");
    }
    let synth = ["synth", "--pattern", "32x32", "--rot", "40", "--out-moving", "a.png", "--out-landmarks", "b.csv", "--out-truth", "c.json"];
    assert_eq!(drmime(&p, &synth).status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let (_d, p) = fixture("0.05");
    let out = drmime(&p, &["register", "--fixed", "f.png", "--moving", "absent.png", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(3));
    let out = drmime(&p, &["eval", "--landmarks", "lm.csv", "--transform", "absent.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn truth_scores_zero_and_identity_scores_the_shift() {
    let (_d, p) = fixture("0.05");
    let truth = naed_mean(&ok(&p, &["eval", "--landmarks", "lm.csv", "--transform", "truth.json"]));
    assert!(truth < 1e-9, "{truth}");

    let (_d2, q) = fixture("0.05");
    ok(&q, &["synth", "--image", "f.png", "--out-moving", "same.png", "--out-landmarks", "x.csv", "--out-truth", "identity.json"]);
    let shifted = naed_mean(&ok(&q, &["eval", "--landmarks", "lm.csv", "--transform", "identity.json"]));
    assert!((shifted - 0.025).abs() < 1e-9, "{shifted}");
}

#[test]
fn register_and_eval_agree() {
    let (_d, p) = fixture("0.05");
    let reg = ok(
        &p,
        &[
            "register", "--fixed", "f.png", "--moving", "m.png", "--out", "r.json", "--iters", "60", "--seed", "5",
            "--landmarks", "lm.csv", "--trace", "trace.csv",
        ],
    );
    let eval = ok(&p, &["eval", "--landmarks", "lm.csv", "--transform", "r.json", "--out-csv", "d.csv"]);
    assert!((naed_mean(&reg) - naed_mean(&eval)).abs() < 1e-9);
    let trace = std::fs::read_to_string(p.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,objective,wall_ms"));
    assert_eq!(trace.lines().count(), 61);
    assert_eq!(std::fs::read_to_string(p.join("d.csv")).unwrap().lines().count(), 17);
}

#[test]
fn register_image_onto_itself() {
    let (_d, p) = fixture("0.0");
    ok(&p, &["register", "--fixed", "f.png", "--moving", "f.png", "--out", "r.json", "--iters", "100", "--seed", "2"]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    let m = json["matrix"].as_array().unwrap();
    for (i, row) in m.iter().enumerate() {
        for (j, x) in row.as_array().unwrap().iter().enumerate() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((x.as_f64().unwrap() - expect).abs() <= 0.02, "{json}");
        }
    }
}

#[test]
fn ablation_flags_run() {
    let (_d, p) = fixture("0.05");
    for extra in [
        &["--levels", "1", "--no-v1"][..],
        &["--no-matrix-exp"],
        &["--sampler", "random", "--metric", "ncc"],
        &["--metric", "mse"],
    ] {
        let mut args = vec!["register", "--fixed", "f.png", "--moving", "m.png", "--out", "r.json", "--iters", "10"];
        args.extend_from_slice(extra);
        ok(&p, &args);
    }
}

#[test]
fn warp_under_identity_reproduces_the_input() {
    let (_d, p) = fixture("0.05");
    ok(&p, &["synth", "--image", "f.png", "--out-moving", "same.png", "--out-landmarks", "x.csv", "--out-truth", "identity.json"]);
    ok(&p, &["warp", "--image", "f.png", "--transform", "identity.json", "--out", "w.png", "--diff", "f.png"]);
    let a = image::open(p.join("f.png")).unwrap().to_luma8();
    let b = image::open(p.join("w.png")).unwrap().to_luma8();
    assert_eq!(a, b);
    let d = image::open(p.join("w_diff.png")).unwrap().to_luma8();
    assert!(d.pixels().all(|px| px.0[0] == 0));
}

#[test]
fn seed_makes_runs_repeatable() {
    let (_d, p) = fixture("0.05");
    let run = |out: &str, seed: &str| {
        ok(&p, &["register", "--fixed", "f.png", "--moving", "m.png", "--out", out, "--iters", "20", "--seed", seed]);
        std::fs::read_to_string(p.join(out)).unwrap()
    };
    assert_eq!(run("a.json", "11"), run("b.json", "11"));
    assert_ne!(run("a.json", "11"), run("c.json", "12"));
}

#[test]
fn flags_override_config_which_overrides_environment() {
    let (_d, p) = fixture("0.05");
    std::fs::write(p.join("run.cfg"), "# short run\niters = 4\nseed = 8\n").unwrap();
    let base = ["--config", "run.cfg", "register", "--fixed", "f.png", "--moving", "m.png", "--trace", "t.csv"];
    let rows = || std::fs::read_to_string(p.join("t.csv")).unwrap().lines().count() - 1;
    let read = |f: &str| std::fs::read_to_string(p.join(f)).unwrap();

    let mut args = base.to_vec();
    args.extend(["--out", "cfg.json"]);
    ok(&p, &args);
    assert_eq!(rows(), 4);

    args = base.to_vec();
    args.extend(["--out", "flag.json", "--iters", "6"]);
    ok(&p, &args);
    assert_eq!(rows(), 6);

    ok(&p, &["register", "--fixed", "f.png", "--moving", "m.png", "--out", "seeded.json", "--iters", "4", "--seed", "8"]);
    assert_eq!(read("cfg.json"), read("seeded.json"));

    let env = Command::new(env!("CARGO_BIN_EXE_drmime"))
        .current_dir(&p)
        .env("DRMIME_SEED", "8")
        .args(["register", "--fixed", "f.png", "--moving", "m.png", "--out", "env.json", "--iters", "4"])
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_eq!(read("env.json"), read("seeded.json"));

    std::fs::write(p.join("bad.cfg"), "colour = red\n").unwrap();
    let out = drmime(&p, &["--config", "bad.cfg", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mi_selftest_independent_case_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["mi-selftest", "--rho", "0", "--n", "2000", "--steps", "300", "--seed", "1"]);
    assert!(out.contains("PASS"), "{out}");
    assert_eq!(drmime(dir.path(), &["mi-selftest", "--rho", "1.5"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--seed", "3"]);
    assert!(out.contains("checks passed"), "{out}");
    assert!(!out.contains("FAIL"));
}
