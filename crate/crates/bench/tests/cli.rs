//! Drives the compiled binary through a run/export/summarize cycle.

use std::process::Command;

use anchorage_bench::experiment::{ExperimentConfig, LoadSegment, TenantLoad};
use anchorage_core::config::PlatformConfig;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn export_and_summarize_agree_on_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        label: "cli-smoke".into(),
        seed: 7,
        duration_secs: 120,
        batch_size: 10,
        platform: PlatformConfig::desk(1),
        loads: vec![TenantLoad {
            tenant: "tenant-a".into(),
            segments: vec![LoadSegment::steady(0, 120, 3.0)],
        }],
    };
    let config_path = dir.path().join("experiment.toml");
    std::fs::write(&config_path, config.to_toml()).unwrap();
    let out = dir.path().join("out");

    let run = bench()
        .args(["run", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let run_stdout = String::from_utf8_lossy(&run.stdout).into_owned();
    assert!(run_stdout.contains("errors=0 backlog=0"), "{run_stdout}");

    for name in ["config.toml", "metrics.csv", "rounds.jsonl", "audits.jsonl", "summary.json"] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    // the summary rebuilt from the exported files matches the live one
    let summarize = bench().args(["summarize", "--dir"]).arg(&out).output().unwrap();
    assert!(summarize.status.success(), "{}", String::from_utf8_lossy(&summarize.stderr));
    let summary = String::from_utf8_lossy(&summarize.stdout);
    assert!(!summary.trim().is_empty());
    assert!(run_stdout.contains(summary.trim()), "run:\n{run_stdout}\nsummarize:\n{summary}");
}

#[test]
fn unknown_profiles_and_bad_configs_are_rejected() {
    let out = bench().args(["run", "--test", "9"]).output().unwrap();
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "label = \"x\"\n").unwrap();
    let out = bench().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
}
