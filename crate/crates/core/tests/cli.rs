//! End-to-end tests of the command-line binary: data generation, training,
//! evaluation, exit codes, and byte-level reproducibility of the whole chain.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_corridor-lfd"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// All files under `dir`, keyed by relative path. `run_config.txt` records
/// the output directory itself, so it is excluded from byte comparisons.
fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel != "run_config.txt" {
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn gen_data(dir: &Path, n: usize) {
    assert_ok(&run(&[
        "gen-data",
        "--n",
        &n.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]));
}

#[test]
fn gen_data_is_deterministic_and_refuses_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_data(&a, 6);
    gen_data(&b, 6);
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert!(ca.len() > 10, "dataset should hold many files, got {}", ca.len());
    assert_eq!(ca, cb, "same flags must produce byte-identical datasets");
    assert!(a.join("run_config.txt").is_file());

    let again = run(&["gen-data", "--n", "6", "--out", a.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(2), "non-empty dir must be refused");
    assert!(stderr(&again).contains("--force"));
    assert_ok(&run(&["gen-data", "--n", "6", "--force", "--out", a.to_str().unwrap()]));
}

#[test]
fn flags_override_config_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let from_flags = tmp.path().join("flags");
    let from_file = tmp.path().join("file");
    gen_data(&from_flags, 5);

    let config = tmp.path().join("gen.json");
    fs::write(
        &config,
        format!(
            "{{\"n\": 9, \"out\": \"{}\"}}",
            from_file.display()
        ),
    )
    .unwrap();
    // --n beats the config file; out comes from the file.
    let out = run(&["gen-data", "--n", "5", "--config", config.to_str().unwrap()]);
    assert_ok(&out);
    assert_eq!(dir_contents(&from_flags), dir_contents(&from_file));

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "budgett=100\n").unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "unknown config keys are usage errors");
    assert!(stderr(&out).contains("budgett"));
}

#[test]
fn short_training_runs_finish_quickly_and_leave_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let models = tmp.path().join("pc");
    gen_data(&data, 6);

    let started = Instant::now();
    let out = run(&[
        "train",
        "--mode",
        "pc",
        "--budget",
        "1000",
        "--data",
        data.to_str().unwrap(),
        "--out",
        models.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(
        started.elapsed().as_secs() < 60,
        "a 1000-update run must stay under a minute, took {:?}",
        started.elapsed()
    );
    for name in [
        "pre.bin",
        "cor.bin",
        "post.bin",
        "loss_pre.csv",
        "loss_cor.csv",
        "loss_post.csv",
        "validation_pre.csv",
        "validation_cor.csv",
        "validation_post.csv",
        "run_config.txt",
    ] {
        assert!(models.join(name).is_file(), "missing artifact {name}");
    }
    let curve = fs::read_to_string(models.join("loss_pre.csv")).unwrap();
    assert!(curve.starts_with("step,value\n"));
    assert_eq!(curve.lines().count(), 201, "200 loss windows plus header");
}

#[test]
fn monolithic_training_reports_the_parameter_match() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, 6);
    let out = run(&[
        "train",
        "--mode",
        "mono",
        "--budget",
        "200",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("mono").to_str().unwrap(),
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("parameter match"), "stdout: {text}");
    assert!(text.contains("252562"), "segmented total missing: {text}");
    assert!(text.contains("252665"), "baseline count missing: {text}");
    assert!(tmp.path().join("mono/mono.bin").is_file());
}

#[test]
fn eval_refuses_checkpoints_from_another_format_version() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let models = tmp.path().join("pc");
    gen_data(&data, 6);
    assert_ok(&run(&[
        "train",
        "--mode",
        "pc",
        "--budget",
        "100",
        "--data",
        data.to_str().unwrap(),
        "--out",
        models.to_str().unwrap(),
    ]));

    let mut bytes = fs::read(models.join("pre.bin")).unwrap();
    bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
    fs::write(models.join("pre.bin"), bytes).unwrap();

    let out = run(&[
        "eval",
        "--models",
        models.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("version"), "stderr: {}", stderr(&out));
}

#[test]
fn eval_honors_a_custom_trial_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let models = tmp.path().join("pc");
    gen_data(&data, 6);
    assert_ok(&run(&[
        "train",
        "--mode",
        "pc",
        "--budget",
        "100",
        "--data",
        data.to_str().unwrap(),
        "--out",
        models.to_str().unwrap(),
    ]));

    let suite = tmp.path().join("two.csv");
    fs::write(&suite, "id,corridor_offset,required\n0,0.02,push\n1,-0.02,pull\n").unwrap();
    let eval_dir = tmp.path().join("eval");
    let out = run(&[
        "eval",
        "--models",
        models.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--trials",
        suite.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("2-trial evaluation"));
    assert!(eval_dir.join("cor_overlay_trial_00.svg").is_file());
    assert!(eval_dir.join("cor_overlay_trial_01.svg").is_file());
    assert!(!eval_dir.join("cor_overlay_trial_02.svg").exists());
}

#[test]
fn full_chain_reproduces_byte_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["x", "y"] {
        let root = tmp.path().join(name);
        let data = root.join("data");
        let models = root.join("pc");
        let eval_dir = root.join("eval");
        gen_data(&data, 6);
        assert_ok(&run(&[
            "train",
            "--mode",
            "pc",
            "--budget",
            "300",
            "--data",
            data.to_str().unwrap(),
            "--out",
            models.to_str().unwrap(),
        ]));
        assert_ok(&run(&[
            "eval",
            "--models",
            models.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
            "--threads",
            "2",
        ]));
        reports.push(dir_contents(&eval_dir));
    }
    assert_eq!(
        reports[0], reports[1],
        "fixed seeds must reproduce identical report files"
    );
    assert!(reports[0].contains_key("trials.csv"));
    assert!(reports[0].contains_key("aggregate.csv"));
    assert!(reports[0].contains_key("summary.txt"));
}

#[test]
fn exit_codes_separate_usage_data_and_success() {
    let usage = run(&["train", "--mode", "sideways"]);
    assert_eq!(usage.status.code(), Some(1));

    let missing = run(&[
        "train",
        "--mode",
        "pc",
        "--data",
        "/nonexistent/data",
        "--out",
        "/tmp/unused-out",
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("gen-data"));
}

#[test]
fn selftest_reports_every_property_and_exits_clean() {
    let out = run(&["selftest"]);
    assert_ok(&out);
    let text = stdout(&out);
    let ok_lines = text.lines().filter(|l| l.starts_with("ok  ")).count();
    assert!(ok_lines >= 16, "expected at least 16 passing checks:\n{text}");
    assert!(!text.contains("FAIL"), "no check may fail:\n{text}");
    assert!(text.contains("0 failed"));
}
