use std::path::Path;
use std::process::Command;

use coopt_cli::{Config, RunArgs};
use coopt_core::bench::{BenchReport, ReportFormat, Workload};
use coopt_core::OptimizationMode;

const SMALL: &str = r#"
[workload]
num_requests = 3
max_new_tokens = 3
seed = 5
prompt_len = { kind = "uniform", min = 4, max = 24 }

[run]
modes = ["original", "opt_gqa", "coopt"]
warmup = 0
"#;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_config_uses_defaults() {
    let cfg = Config::parse("").unwrap();
    assert_eq!(cfg, Config::default());
    assert_eq!(
        cfg.modes().unwrap(),
        vec![OptimizationMode::Original, OptimizationMode::Coopt]
    );
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(Config::parse("[model]\nheads = 4\n").is_err());
    assert!(Config::parse("[workload]\nnum_request = 4\n").is_err());
    assert!(Config::parse("[extra]\n").is_err());
}

#[test]
fn precision_must_match_mode() {
    let ok = "[cache]\nprecision = { coopt = \"fp8\", original = \"fp32\" }\n";
    assert!(Config::parse(ok).unwrap().modes().is_ok());
    let bad = "[cache]\nprecision = { coopt = \"fp32\" }\n";
    assert!(Config::parse(bad).unwrap().modes().is_err());
}

#[test]
fn flags_override_config() {
    let mut cfg = Config::parse(SMALL).unwrap();
    let args = RunArgs {
        modes: Some(vec!["opt_pa".into()]),
        format: Some(ReportFormat::Csv),
        repeats: Some(4),
        block_size: Some(8),
        workload_seed: Some(9),
        ..RunArgs::default()
    };
    args.apply(&mut cfg);
    assert_eq!(cfg.modes().unwrap(), vec![OptimizationMode::OptPa]);
    assert_eq!(cfg.run.format, ReportFormat::Csv);
    assert_eq!(cfg.run.repeats, 4);
    assert_eq!(cfg.cache.block_size, 8);
    assert_eq!(cfg.workload.seed, 9);
    // Fields without a flag keep their config value.
    assert_eq!(cfg.workload.num_requests, 3);
    assert_eq!(cfg.run.warmup, 0);
}

#[test]
fn run_writes_one_entry_per_requested_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("report.json");
    let st = bench()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--modes", "original,coopt", "--format", "json", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let report = BenchReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let modes: Vec<_> = report.modes.iter().map(|m| m.mode.as_str()).collect();
    assert_eq!(modes, ["original", "coopt"]);
    assert_eq!(report.modes[0].workload_checksum, report.modes[1].workload_checksum);
    assert!(report.modes.iter().all(|m| m.error.is_none()));
    assert_eq!(report.modes[0].total_tokens, 9);
}

#[test]
fn csv_report_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = bench()
        .args(["run", "--format", "csv", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let rows = coopt_core::bench::parse_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
}

#[test]
fn workload_file_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", SMALL);
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for path in [&a, &b] {
        let st = bench().args(["workload", "--spec"]).arg(&spec).arg("--out").arg(path).status();
        assert!(st.unwrap().success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let w = Workload::read(&a).unwrap();
    assert_eq!(w.requests.len(), 3);

    let out = dir.path().join("r.json");
    let st = bench()
        .args(["run", "--modes", "opt_kv", "--workload"])
        .arg(&a)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let report = BenchReport::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.modes[0].workload_checksum, w.checksum());
}

#[test]
fn selftest_passes() {
    let out = bench().args(["selftest", "--seed", "3"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("selftest passed"));
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!bench().args(["run", "--modes", "fast"]).status().unwrap().success());
    let missing = dir.path().join("missing.toml");
    assert!(!bench().args(["run", "--config"]).arg(&missing).status().unwrap().success());
    let garbage = write(dir.path(), "w.bin", "not a workload");
    let st = bench().args(["run", "--workload"]).arg(&garbage).status().unwrap();
    assert!(!st.success());
}
