//! Exercises the `pdfevo` binary: exit codes, artifact layout and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pdfevo");

/// Small zero-mean Duffing run; `extra` is appended verbatim.
fn write_config(dir: &Path, name: &str, variance: f64, nodes: usize, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 1

[system]
type = "duffing"
zeta = 0.5

[excitation]
kernel = "gaussian_filter"
variance = {variance}
peak_freq = 2.5
tau_tilde = 0.1

[initial]
mean = [0.0, 0.0]
cov = [[0.3, 0.0], [0.0, 0.3]]

[grid]
lo = [-3.0, -3.0]
hi = [3.0, 3.0]
nodes = [{nodes}, {nodes}]

[mc]
n_paths = 2000

[output]
times = [0.5]
{extra}
"#
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn pdfevo(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn solve_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", 0.36, 41, "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let res = pdfevo(&["solve", "--method", "ngfpk", "--config", arg(&cfg), "--out", arg(out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let files = csv_files(&a);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    for expected in ["diagnostics.csv", "moments.csv"] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("pdf_t")));
    assert!(a.join("summary.json").exists());
    for (name, bytes) in &files {
        assert!(bytes.starts_with(b"# pdfevo "), "{name} lacks the schema line");
    }
    assert_eq!(files, csv_files(&b));
}

#[test]
fn invalid_config_exits_1_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", -1.0, 41, "");
    let out = tmp.path().join("out");
    let res = pdfevo(&["solve", "--method", "sct", "--config", arg(&cfg), "--out", arg(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("excitation.variance"));
    assert!(!out.exists());

    let res = pdfevo(&[
        "solve",
        "--method",
        "sct",
        "--config",
        arg(&tmp.path().join("absent.toml")),
        "--out",
        arg(&out),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn closure_failure_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[solver]\nclosure_tol = 1e-300\nmax_closure_iterations = 1\n";
    let cfg = write_config(tmp.path(), "strict.toml", 0.36, 41, extra);
    let out = tmp.path().join("out");
    let res = pdfevo(&["solve", "--method", "ngfpk", "--config", arg(&cfg), "--out", arg(&out)]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn mc_seed_controls_the_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "mc.toml", 0.36, 41, "");
    let run = |dir: &str, seed: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut args = vec!["mc", "--config", arg(&cfg), "--out", arg(&out)];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let res = pdfevo(&args);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        csv_files(&out)
    };
    let a = run("a", None);
    assert_eq!(a, run("b", None));
    assert_ne!(a, run("c", Some("9")));
}

#[test]
fn compare_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", 0.36, 41, "[bench]\nt_end = 0.5\nstep = 0.1\n");
    let coarse = write_config(tmp.path(), "coarse.toml", 0.36, 51, "");
    let (mc, solve, other) = (
        tmp.path().join("mc"),
        tmp.path().join("solve"),
        tmp.path().join("other"),
    );
    assert!(pdfevo(&["mc", "--config", arg(&cfg), "--out", arg(&mc)])
        .status
        .success());
    assert!(
        pdfevo(&["solve", "--method", "sct", "--config", arg(&cfg), "--out", arg(&solve)])
            .status
            .success()
    );
    assert!(pdfevo(&[
        "solve",
        "--method",
        "sct",
        "--config",
        arg(&coarse),
        "--out",
        arg(&other)
    ])
    .status
    .success());

    let report = tmp.path().join("report");
    let res = pdfevo(&["compare", arg(&solve), arg(&solve), "--out", arg(&report)]);
    assert!(res.status.success());
    let json: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(json["times"][0]["joint_l1"].as_f64(), Some(0.0));
    assert!(report.join("compare.json").exists());

    let res = pdfevo(&["compare", arg(&solve), arg(&mc)]);
    assert!(res.status.success());
    let json: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(json["times"][0]["joint_l1"].as_f64().unwrap() > 0.0);

    assert_eq!(pdfevo(&["compare", arg(&solve), arg(&other)]).status.code(), Some(1));

    let bench = tmp.path().join("bench");
    let res = pdfevo(&["propagator-bench", "--config", arg(&cfg), "--out", arg(&bench)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!bench.exists());
    let res = pdfevo(&[
        "propagator-bench",
        "--config",
        arg(&cfg),
        "--out",
        arg(&bench),
        "--moments",
        arg(&mc),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(bench.join("bench.csv")).unwrap();
    assert!(text.lines().any(|l| l.contains(",magnus,3,")));
}
