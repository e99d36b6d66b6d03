//! End-to-end checks of the `invrec` binary: every subcommand is exercised
//! through real processes against temporary directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn invrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invrec"))
        .args(args)
        .output()
        .expect("the binary should run")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status,
        stdout_of(out),
        stderr_of(out)
    );
}

fn assert_fails(out: &Output) {
    assert!(
        !out.status.success(),
        "expected failure, got success\nstdout: {}",
        stdout_of(out)
    );
}

/// Writes a smoke-sized config into `dir` and returns its path. Data and
/// run directories land inside `dir` unless overridden.
fn write_config(dir: &Path, extra: &[(&str, &str)]) -> PathBuf {
    let mut keys: BTreeMap<&str, String> = BTreeMap::new();
    let defaults = [
        ("seed", "11"),
        ("embedding_dim", "4"),
        ("num_envs", "2"),
        ("epochs_him", "2"),
        ("identify_rounds", "2"),
        ("iters_mask", "3"),
        ("epochs_final", "3"),
        ("outer_iters", "1"),
        ("batch_size", "64"),
        ("eval_k", "5"),
        ("neighbor_k", "3"),
        ("synth_users", "30"),
        ("synth_items", "40"),
        ("synth_d_inv", "2"),
        ("synth_d_spu", "2"),
        ("synth_density", "0.08"),
        ("split_ratio", "0.15"),
    ];
    keys.insert("data_dir", dir.join("data").display().to_string());
    keys.insert("run_dir", dir.join("run").display().to_string());
    for (k, v) in defaults {
        keys.insert(k, v.to_string());
    }
    for (k, v) in extra {
        keys.insert(k, v.to_string());
    }
    let mut text = String::new();
    for (k, v) in &keys {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let path = dir.join("config.txt");
    fs::write(&path, text).unwrap();
    path
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn synth_writes_matching_files_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    fs::create_dir_all(&first).unwrap();
    fs::create_dir_all(&second).unwrap();
    let cfg_a = write_config(&first, &[]);
    let cfg_b = write_config(&second, &[]);

    assert_ok(&invrec(&["synth", "--config", cfg_a.to_str().unwrap()]));
    assert_ok(&invrec(&["synth", "--config", cfg_b.to_str().unwrap()]));

    let data_a = first.join("data");
    let data_b = second.join("data");
    let interactions = line_count(&data_a.join("interactions.tsv"));
    assert!(interactions > 0);
    // One environment label per interaction, one feature row per item.
    assert_eq!(line_count(&data_a.join("environments.tsv")), interactions);
    assert_eq!(line_count(&data_a.join("features.tsv")), 40);
    // The split partitions the interactions exactly.
    let split_total = line_count(&data_a.join("train.tsv"))
        + line_count(&data_a.join("test_iid.tsv"))
        + line_count(&data_a.join("test_ood.tsv"));
    assert_eq!(split_total, interactions);

    // Same seed, different directory: identical bytes.
    for file in [
        "interactions.tsv",
        "features.tsv",
        "environments.tsv",
        "train.tsv",
        "test_iid.tsv",
        "test_ood.tsv",
        "id_map.tsv",
        "split.manifest",
    ] {
        let a = fs::read(data_a.join(file)).unwrap();
        let b = fs::read(data_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical synth runs");
    }
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let out = invrec(&["synth", "--set", "sede=1"]);
    assert_fails(&out);
    assert!(stderr_of(&out).contains("sede"), "{}", stderr_of(&out));
}

#[test]
fn train_evaluate_and_resume_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    let cfg = cfg.to_str().unwrap();
    let run_dir = dir.path().join("run");

    assert_ok(&invrec(&["synth", "--config", cfg]));
    let out = invrec(&["train", "--config", cfg]);
    assert_ok(&out);
    assert!(stdout_of(&out).contains("test_ood"));

    for file in ["config", "partition.tsv", "mask.tsv", "metrics.tsv", "log.txt"] {
        assert!(run_dir.join(file).exists(), "{file} missing after train");
    }
    assert!(run_dir.join("checkpoints").join("final.model").exists());

    // Every log line is epoch<TAB>stage<TAB>loss<TAB>w_erm.
    let log = fs::read_to_string(run_dir.join("log.txt")).unwrap();
    assert!(!log.is_empty());
    for line in log.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "bad log line {line:?}");
        let stage = fields[1];
        assert!(
            stage == "final" || stage.starts_with("identify_") || stage.starts_with("mask_"),
            "unexpected stage {stage:?}"
        );
    }

    // A second fresh train refuses the populated run directory...
    let out = invrec(&["train", "--config", cfg]);
    assert_fails(&out);
    assert!(stderr_of(&out).contains("checkpoints"), "{}", stderr_of(&out));

    // ...while a resume reuses the checkpoints and reproduces the metrics.
    let before = fs::read(run_dir.join("metrics.tsv")).unwrap();
    assert_ok(&invrec(&["train", "--resume", run_dir.to_str().unwrap()]));
    let after = fs::read(run_dir.join("metrics.tsv")).unwrap();
    assert_eq!(before, after);

    // Evaluating at another cutoff rewrites the table keyed by that K.
    let out = invrec(&["evaluate", "--run-dir", run_dir.to_str().unwrap(), "--k", "3"]);
    assert_ok(&out);
    let metrics = fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    for line in metrics.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "bad metrics line {line:?}");
        assert_eq!(fields[2], "3");
        let value: f64 = fields[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&value));
    }
}

#[test]
fn train_names_a_missing_data_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let cfg = write_config(dir.path(), &[("data_dir", missing.to_str().unwrap())]);
    let out = invrec(&["train", "--config", cfg.to_str().unwrap()]);
    assert_fails(&out);
    assert!(stderr_of(&out).contains("nope"), "{}", stderr_of(&out));
}

#[test]
fn evaluate_requires_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &[]);
    assert_ok(&invrec(&["synth", "--config", cfg.to_str().unwrap()]));
    let empty_run = dir.path().join("empty-run");
    fs::create_dir_all(&empty_run).unwrap();
    let out = invrec(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--run-dir",
        empty_run.to_str().unwrap(),
    ]);
    assert_fails(&out);
    assert!(stderr_of(&out).contains("final.model"), "{}", stderr_of(&out));
}

#[test]
fn pareto_demo_reports_the_solution_for_symmetric_gradients() {
    let out = invrec(&["pareto-demo", "1 0", "0 1"]);
    assert_ok(&out);
    let text = stdout_of(&out);
    assert!(text.contains("w_erm = 0.5"), "{text}");
    assert!(text.contains("w_irm = 0.5"), "{text}");
    assert!(text.contains("direction = -0.5 -0.5"), "{text}");
    assert!(text.contains("kkt_stationary = false"), "{text}");
}

#[test]
fn pareto_demo_reads_gradients_from_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_invrec"))
        .arg("pareto-demo")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(b"4 0\n0 1\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_ok(&out);
    let text = stdout_of(&out);
    assert!(text.contains("w_erm = "), "{text}");
    assert!(text.contains("sq_norm = "), "{text}");
}

#[test]
fn gradcheck_passes_and_the_bug_hook_names_the_worst_index() {
    let out = invrec(&["gradcheck"]);
    assert_ok(&out);
    assert!(stdout_of(&out).contains("all gradient checks passed"));

    let out = invrec(&["gradcheck", "--inject-bug"]);
    assert_fails(&out);
    assert!(stderr_of(&out).contains("worst index 0"), "{}", stderr_of(&out));

    // A loose tolerance accepts even the corrupted gradient.
    let out = invrec(&["gradcheck", "--inject-bug", "--tolerance", "1e9"]);
    assert_ok(&out);
}
