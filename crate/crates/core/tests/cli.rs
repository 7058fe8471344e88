//! Exercises the command-line interface as a black box: exit codes, output
//! files and formats, and the map build/refine/export round trip.

use skybeam::sim::RECORDS_HEADER;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skybeam"))
}

fn workspace_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn simulate_writes_the_documented_csv_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.csv");
    let out = bin()
        .arg("simulate")
        .arg(workspace_path("scenarios/canyon.json"))
        .arg("-o")
        .arg(&records)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let text = std::fs::read_to_string(&records).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(RECORDS_HEADER));
    assert_eq!(lines.count(), 500);
}

#[test]
fn missing_or_invalid_configuration_exits_two() {
    // Nonexistent scenario file.
    let out = bin()
        .arg("simulate")
        .arg("definitely/not/here.json")
        .arg("-o")
        .arg("unused.csv")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).starts_with("error: "), "stderr: {}", stderr(&out));

    // Structurally invalid scenario: unknown field.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"mapp": "x.json"}"#).unwrap();
    let out = bin().arg("simulate").arg(&bad).arg("-o").arg(dir.path().join("r.csv")).output().unwrap();
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));

    // Well-formed JSON, out-of-range value.
    let zero_slots = serde_json::json!({
        "map": "map.json",
        "stations": [{"position": [50.0, 50.0, 10.0]}],
        "initial_state": {"position": [20.0, 20.0, 30.0], "velocity": [1.0, 0.0, 0.0]},
        "slots": 0,
        "seed": 1
    });
    std::fs::write(&bad, zero_slots.to_string()).unwrap();
    let out = bin().arg("simulate").arg(&bad).arg("-o").arg(dir.path().join("r.csv")).output().unwrap();
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(!dir.path().join("r.csv").exists(), "config error must not leave output behind");
}

#[test]
fn degraded_mode_runs_exit_three_but_still_write_records() {
    let dir = tempfile::tempdir().unwrap();
    let map = serde_json::json!({
        "region": {
            "q_lower": [0.0, 0.0, 0.0],
            "q_upper": [200.0, 200.0, 120.0],
            "cell_size": [50.0, 50.0, 60.0]
        },
        "buildings": []
    });
    std::fs::write(dir.path().join("map.json"), map.to_string()).unwrap();
    // The UAV flies below the mast, a geometry the upward-facing array cannot
    // observe: every slot falls back to the map prior and a boresight beam.
    let scenario = serde_json::json!({
        "map": "map.json",
        "stations": [{"position": [100.0, 100.0, 80.0]}],
        "initial_state": {"position": [40.0, 40.0, 10.0], "velocity": [1.0, 0.0, 0.0]},
        "slots": 4,
        "seed": 11,
        "filter_init": "known_state"
    });
    let scenario_path = dir.path().join("below_mast.json");
    std::fs::write(&scenario_path, scenario.to_string()).unwrap();

    let records = dir.path().join("records.csv");
    let out = bin().arg("simulate").arg(&scenario_path).arg("-o").arg(&records).output().unwrap();
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("fallback:"), "stderr: {err}");
    assert!(err.contains("degraded-mode event"), "stderr: {err}");

    // The run still completed and logged all slots.
    let text = std::fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn lpm_build_refine_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let map = serde_json::json!({
        "region": {
            "q_lower": [0.0, 0.0, 0.0],
            "q_upper": [100.0, 100.0, 50.0],
            "cell_size": [25.0, 25.0, 25.0]
        },
        "buildings": [
            {"footprint": [[40.0, 0.0], [60.0, 0.0], [60.0, 100.0], [40.0, 100.0]], "height": 40.0}
        ]
    });
    std::fs::write(dir.path().join("map.json"), map.to_string()).unwrap();
    std::fs::write(
        dir.path().join("bs.json"),
        serde_json::json!({"position": [10.0, 50.0, 20.0]}).to_string(),
    )
    .unwrap();

    let lpm = dir.path().join("site.lpm");
    let out = bin()
        .arg("build-lpm")
        .arg(dir.path().join("map.json"))
        .arg(dir.path().join("bs.json"))
        .arg("-o")
        .arg(&lpm)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(lpm.exists());

    let export = |path: &Path| -> Vec<String> {
        let out = bin().arg("export-lpm-csv").arg(path).output().unwrap();
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
        stdout(&out).lines().map(str::to_owned).collect()
    };
    let before = export(&lpm);
    assert_eq!(before[0], "ix,iy,iz,x,y,z,p_los");
    assert_eq!(before.len(), 1 + 4 * 4 * 2);

    // A cell across the building from the mast: NLoS measurements should
    // drag its probability down further.
    std::fs::write(
        dir.path().join("obs.csv"),
        "x,y,z,los\n87.5,62.5,12.5,0\n87.5,62.5,12.5,0\n87.5,62.5,12.5,0\n",
    )
    .unwrap();
    let out = bin()
        .arg("refine-lpm")
        .arg(&lpm)
        .arg(dir.path().join("obs.csv"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let after = export(&lpm);
    assert_eq!(after.len(), before.len());
    let p_of = |lines: &[String]| -> f64 {
        lines
            .iter()
            .find(|l| l.starts_with("3,2,0,"))
            .unwrap()
            .rsplit(',')
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(
        p_of(&after) < p_of(&before),
        "refinement did not move the observed cell: {} -> {}",
        p_of(&before),
        p_of(&after)
    );
}

#[test]
fn metrics_subcommand_flags_undefined_rates() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.csv");
    let out = bin()
        .arg("simulate")
        .arg(workspace_path("scenarios/nominal.json"))
        .arg("-o")
        .arg(&records)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let out = bin().arg("metrics").arg(&records).output().unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("metric,value,status"), "stdout: {text}");
    // Open sky never yields a truly-NLoS slot, so the detection rate has no
    // denominator and must be flagged, not zeroed.
    assert!(text.contains("detection_rate,NaN,undefined"), "stdout: {text}");
    assert!(text.contains("false_alarm_rate,0,defined"), "stdout: {text}");
    assert!(text.contains("handover_count,0,defined"), "stdout: {text}");
}

#[test]
fn batch_reports_summaries_and_writes_per_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let per_run = dir.path().join("per_run.csv");
    let out = bin()
        .arg("batch")
        .arg(workspace_path("scenarios/canyon.json"))
        .arg("--runs")
        .arg("3")
        .arg("--seed")
        .arg("5")
        .arg("-o")
        .arg(&per_run)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,mean,ci_low,ci_high,defined_runs"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 8, "stdout: {text}");
    for name in ["pos_rmse", "ident_accuracy", "mean_rate", "handover_count"] {
        assert!(body.iter().any(|l| l.starts_with(name)), "missing {name}: {text}");
    }

    let per_run_text = std::fs::read_to_string(&per_run).unwrap();
    let mut lines = per_run_text.lines();
    assert_eq!(
        lines.next(),
        Some("run,pos_rmse,vel_rmse,ident_accuracy,detection_rate,false_alarm_rate,mean_rate,outage_fraction,handover_count")
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn batch_rejects_zero_runs_as_configuration() {
    let out = bin()
        .arg("batch")
        .arg(workspace_path("scenarios/canyon.json"))
        .arg("--runs")
        .arg("0")
        .arg("--seed")
        .arg("5")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}
