//! End-to-end tests of the `tokencake` binary: exit codes, output files,
//! and byte-for-byte reproducibility of artifacts.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tokencake"))
}

/// A scenario small enough that every invocation finishes in well under a
/// second but still exercises stalls, offloads, and evictions.
const SMALL_SCENARIO: &str = r#"
app = "code_writer"
qps = 0.4
duration_s = 20.0
seed = 1

[engine]
total_device_blocks = 64
total_host_blocks = 512
block_size_tokens = 16
max_batch_size = 8
"#;

fn write_scenario(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL_SCENARIO).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary spawns");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

#[test]
fn missing_scenario_file_exits_with_config_error() {
    let out = bin()
        .args(["run", "--scenario", "/no/such/scenario.toml"])
        .output()
        .expect("binary spawns");
    assert_eq!(out.status.code(), Some(2), "config problems must exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("/no/such/scenario.toml"),
        "stderr must name the missing file, got: {stderr}"
    );
}

#[test]
fn malformed_scenario_exits_with_config_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "app = \"code_writer\"\nqps = \"not a number\"\n").unwrap();
    let out = bin()
        .arg("run")
        .arg("--scenario")
        .arg(&path)
        .output()
        .expect("binary spawns");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn impossible_qps_override_exits_with_config_error() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    let out = bin()
        .arg("run")
        .arg("--scenario")
        .arg(&scenario)
        .args(["--qps", "-1.0"])
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .expect("binary spawns");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_trace_and_report() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    let out_dir = dir.path().join("out");
    let out = run_ok(bin()
        .arg("run")
        .arg("--scenario")
        .arg(&scenario)
        .arg("--out")
        .arg(&out_dir));

    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("policy=tokencake"), "summary line missing: {stdout}");

    let trace = read(&out_dir.join("trace.jsonl"));
    assert!(trace.lines().count() > 10, "trace suspiciously short");
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("every line is JSON");
        assert!(v.get("t_ms").is_some() && v.get("kind").is_some());
    }

    let report = read(&out_dir.join("report.csv"));
    let mut lines = report.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("policy,qps,seed,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1, "run writes exactly one report row");
    assert!(rows[0].starts_with("tokencake,0.4,1,"));
}

#[test]
fn runs_are_reproducible_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    for out_dir in ["a", "b"] {
        run_ok(bin()
            .arg("run")
            .arg("--scenario")
            .arg(&scenario)
            .args(["--policy", "retain", "--seed", "7"])
            .arg("--out")
            .arg(dir.path().join(out_dir)));
    }
    assert_eq!(
        read(&dir.path().join("a/trace.jsonl")),
        read(&dir.path().join("b/trace.jsonl")),
        "same scenario, same seed: traces must match byte for byte"
    );
    assert_eq!(read(&dir.path().join("a/report.csv")), read(&dir.path().join("b/report.csv")));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    for (out_dir, seed) in [("a", "1"), ("b", "2")] {
        run_ok(bin()
            .arg("run")
            .arg("--scenario")
            .arg(&scenario)
            .args(["--seed", seed])
            .arg("--out")
            .arg(dir.path().join(out_dir)));
    }
    assert_ne!(
        read(&dir.path().join("a/trace.jsonl")),
        read(&dir.path().join("b/trace.jsonl")),
        "different seeds must produce different arrival patterns"
    );
}

#[test]
fn report_recomputes_from_saved_trace() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    let run_dir = dir.path().join("run");
    run_ok(bin().arg("run").arg("--scenario").arg(&scenario).arg("--out").arg(&run_dir));

    let report_dir = dir.path().join("report");
    let out = run_ok(bin()
        .arg("report")
        .arg("--trace")
        .arg(run_dir.join("trace.jsonl"))
        .arg("--out")
        .arg(&report_dir));
    assert!(String::from_utf8_lossy(&out.stdout).contains("events"));

    let text = read(&report_dir.join("report.csv"));
    assert!(text.starts_with("metric,value\n"));
    for key in ["app_count", "avg_e2e_ms", "offloads", "truncated"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key},"))), "missing {key}");
    }

    // Aggregating the same trace twice is byte-identical.
    let again = dir.path().join("report2");
    run_ok(bin()
        .arg("report")
        .arg("--trace")
        .arg(run_dir.join("trace.jsonl"))
        .arg("--out")
        .arg(&again));
    assert_eq!(text, read(&again.join("report.csv")));
}

#[test]
fn sweep_grid_produces_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    let out_dir = dir.path().join("out");
    let out = run_ok(bin()
        .arg("sweep")
        .arg("--scenario")
        .arg(&scenario)
        .args(["--policies", "tokencake,retain"])
        .args(["--qps", "0.2,0.6"])
        .args(["--seeds", "1,2"])
        .args(["--threads", "2"])
        .arg("--out")
        .arg(&out_dir));

    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tokencake") && stdout.contains("retain"));

    let report = read(&out_dir.join("report.csv"));
    assert_eq!(report.lines().count() - 1, 2 * 2 * 2, "one row per (policy, qps, seed)");

    let compare = read(&out_dir.join("compare.csv"));
    assert!(compare.lines().next().unwrap().starts_with("qps,policy,"));
    // Two qps values x two policies.
    assert_eq!(compare.lines().count() - 1, 4);
}

#[test]
fn sweep_is_reproducible_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    for (out_dir, threads) in [("a", "1"), ("b", "4")] {
        run_ok(bin()
            .arg("sweep")
            .arg("--scenario")
            .arg(&scenario)
            .args(["--policies", "tokencake,evict"])
            .args(["--qps", "0.3"])
            .args(["--seeds", "1,2"])
            .args(["--threads", threads])
            .arg("--out")
            .arg(dir.path().join(out_dir)));
    }
    assert_eq!(
        read(&dir.path().join("a/report.csv")),
        read(&dir.path().join("b/report.csv")),
        "worker count must not affect results"
    );
}

#[test]
fn plot_emits_data_files_and_script() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path());
    let out_dir = dir.path().join("out");
    // A single-run trace plus a sweep report in the same directory; the
    // sweep goes second because both commands write report.csv.
    run_ok(bin().arg("run").arg("--scenario").arg(&scenario).arg("--out").arg(&out_dir));
    run_ok(bin()
        .arg("sweep")
        .arg("--scenario")
        .arg(&scenario)
        .args(["--policies", "tokencake,retain", "--qps", "0.2,0.6", "--seeds", "1"])
        .arg("--out")
        .arg(&out_dir));

    run_ok(bin().arg("plot").arg("--out").arg(&out_dir));
    let plots = out_dir.join("plots");

    let latency = read(&plots.join("latency_vs_qps.dat"));
    assert!(latency.starts_with("# qps"));
    assert_eq!(latency.lines().count() - 1, 2, "one line per qps value");

    let abnormal = read(&plots.join("abnormal.dat"));
    assert!(abnormal.lines().count() >= 3, "header plus one bar per policy");

    let timeline = read(&plots.join("util_timeline.dat"));
    assert!(timeline.lines().count() > 5, "timeline needs samples to plot");

    let script = read(&plots.join("plot.gp"));
    for artifact in ["latency_vs_qps", "abnormal", "util_timeline"] {
        assert!(script.contains(artifact), "plot.gp must reference {artifact}");
    }
}

#[test]
fn plot_without_artifacts_fails_cleanly() {
    let dir = TempDir::new().unwrap();
    let out = bin().arg("plot").arg("--out").arg(dir.path()).output().expect("binary spawns");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to plot"));
}
