use std::path::Path;
use std::process::{Command, Output};

fn otadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otadapt")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field<'a>(summary: &'a str, key: &str) -> &'a str {
    summary
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {summary}"))
}

#[test]
fn default_adapt_run_reports_accuracy() {
    let out = otadapt(&[
        "adapt", "--variant", "clip_ot", "--epsilon", "0.7", "--sinkhorn-iters", "3", "--lr", "1e-4",
        "--batch-size", "128", "--seed", "1", "--synthetic", "default",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout(&out);
    let accuracy: f64 = field(&summary, "accuracy").parse().unwrap();
    assert!((0.0..=100.0).contains(&accuracy));
    assert_eq!(field(&summary, "variant"), "clip_ot");
    assert_eq!(summary.lines().count(), 1);
}

#[test]
fn same_arguments_give_the_same_summary() {
    let args = ["adapt", "--variant", "avg_template", "--lr", "1e-2", "--seed", "4", "--synthetic", "default"];
    assert_eq!(stdout(&otadapt(&args)), stdout(&otadapt(&args)));
}

#[test]
fn defaults_match_the_library_and_flags_override_them() {
    let summary = stdout(&otadapt(&["adapt", "--synthetic", "clean", "--variant", "zero_shot"]));
    for (key, value) in [("epsilon", "0.7"), ("sinkhorn_iters", "3"), ("lr", "0.0001"), ("batch_size", "128"), ("tau", "0.01")] {
        assert_eq!(field(&summary, key), value, "{summary}");
    }
    let summary = stdout(&otadapt(&[
        "adapt", "--synthetic", "clean", "--variant", "zero_shot", "--epsilon", "0.3", "--sinkhorn-iters", "5",
        "--lr", "0.5", "--batch-size", "64", "--tau", "0.02",
    ]));
    for (key, value) in [("epsilon", "0.3"), ("sinkhorn_iters", "5"), ("lr", "0.5"), ("batch_size", "64"), ("tau", "0.02")] {
        assert_eq!(field(&summary, key), value, "{summary}");
    }
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["adapt", "--epsilon", "-1", "--synthetic", "default"],
        vec!["adapt", "--sinkhorn-iters", "0", "--synthetic", "default"],
        vec!["adapt", "--variant", "nonsense", "--synthetic", "default"],
        vec!["adapt", "--no-such-flag"],
        vec!["adapt", "--synthetic", "no_such_preset"],
        vec!["sweep", "--synthetic", "default", "--epsilons", "0.7"],
    ] {
        let out = otadapt(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(out.stdout.is_empty(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let out = otadapt(&["inspect", "/nonexistent/file.oteb"]);
    assert_eq!(out.status.code(), Some(2));

    let out = otadapt(&["adapt", "--synthetic", "default", "--epsilon", "0.05", "--stabilization", "plain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non_finite_kernel"));

    let out = otadapt(&["adapt", "--synthetic", "default", "--epsilon", "0.05", "--stabilization", "log_domain"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn generated_files_inspect_and_adapt_without_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stream.oteb");
    let path_str = path.to_str().unwrap();
    let out = otadapt(&["gen", "--synthetic", "clean", "--seed", "3", "--output", path_str]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let summary = stdout(&otadapt(&["inspect", path_str]));
    assert_eq!(field(&summary, "d"), "32");
    assert_eq!(field(&summary, "K"), "10");
    assert_eq!(field(&summary, "M"), "8");
    assert_eq!(field(&summary, "labels"), "true");
    assert_eq!(field(&summary, "n"), "2560");

    let out = otadapt(&["adapt", "--input", path_str, "--variant", "training_free"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let accuracy: f64 = field(&stdout(&out), "accuracy").parse().unwrap();
    assert!(accuracy > 95.0, "{accuracy}");

    // LayerNorm variants need the encoder, which a file does not carry
    let out = otadapt(&["adapt", "--input", path_str, "--variant", "clip_ot"]);
    assert_eq!(out.status.code(), Some(1));
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn sweep_writes_complete_reports_and_marks_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = otadapt(&[
        "sweep", "--synthetic", "default", "--variants", "zero_shot,training_free", "--epsilons", "0.05,0.7",
        "--stabilization", "plain", "--seeds", "0,1", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout(&out);
    assert_eq!(field(&summary, "rows"), "4");
    assert_eq!(field(&summary, "errors"), "1");

    let csv = read(dir.path(), "results.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("variant,epsilon,templates,severity,seeds,accuracy_mean"));
    assert_eq!(lines.iter().filter(|l| l.contains("ERR(non_finite_kernel)")).count(), 1);
    assert!(read(dir.path(), "results.md").contains("ERR(non_finite_kernel)"));
    // one timing line per (row, seed)
    assert_eq!(read(dir.path(), "timings.csv").lines().count(), 1 + 4 * 2);
}
