//! Config parsing, artifacts, replay and the command-line binary.

use std::path::Path;
use std::process::Command;

use netctl::config::ExperimentConfig;
use netctl::harness::{self, read_summary, replay, Summary, SLOPES_FILE, SUMMARY_FILE, TRACE_FILE, TRACE_HEADER};
use netctl::known::run_known;
use netctl::regret::{dfc_rollout_cost, mean_regret, offline_optimal_dfc};

const BASE: &str = r#"
mode = "known"
seed = 3

[system]
a = [[0.5, 0.1], [0.1, 0.3]]
b = [[1.0, 0.0], [0.0, 1.0]]
k = [[0.0, 0.0], [0.0, 0.0]]

[network]
topology = "ring"
agents = 3

[noise]
kind = "sinusoid"
amplitude = 1.0

[costs]
kind = "drift"
q = [[0.25, 0.0], [0.0, 0.25]]
r = [[0.0625, 0.0], [0.0, 0.0625]]
target_radius = 0.1
omega = 0.05
drift = 0.3

[run]
horizon = 120
eta = "auto"
"#;

fn m1_config() -> String {
    BASE.replace("agents = 3", "agents = 1").replace("horizon = 120", "horizon = 100")
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_netctl"))
}

#[test]
fn minimal_single_agent_run_has_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m1.toml", &m1_config());
    let out = dir.path().join("out");
    let summary = harness::run(&cfg, Some(&out)).unwrap();
    let csv = std::fs::read_to_string(out.join(TRACE_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    assert_eq!(lines.count(), 100);
    assert_eq!(summary.runs[0].rows, 100);
    assert_eq!(summary.schema_version, harness::SCHEMA_VERSION);
}

#[test]
fn missing_eta_is_a_config_error_naming_eta() {
    let text = BASE.replace("eta = \"auto\"\n", "");
    let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
    assert!(err.to_string().contains("eta"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "noeta.toml", &text);
    let status = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("o")).arg("--quiet").output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("eta"));
}

#[test]
fn replay_is_byte_identical_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let first = dir.path().join("first");
    harness::run(&cfg, Some(&first)).unwrap();
    let summary = read_summary(&first.join(SUMMARY_FILE)).unwrap();

    let again = replay(&summary).unwrap();
    assert!(again.identical());
    let second = dir.path().join("second");
    harness::write_artifacts(&again.artifacts, &second).unwrap();
    assert_eq!(
        std::fs::read(first.join(TRACE_FILE)).unwrap(),
        std::fs::read(second.join(TRACE_FILE)).unwrap()
    );
    assert_eq!(
        std::fs::read(first.join(SUMMARY_FILE)).unwrap(),
        std::fs::read(second.join(SUMMARY_FILE)).unwrap()
    );

    let mut tampered: Summary = summary.clone();
    tampered.config.seed += 1;
    let bad = replay(&tampered).unwrap();
    assert!(!bad.trace_matches);
    assert!(!bad.config_matches);

    // through the binary: exit 0 on a faithful replay, 1 on a mismatch
    let code = bin().arg("--replay").arg(first.join(SUMMARY_FILE)).arg("--out").arg(dir.path().join("r")).arg("--quiet").status().unwrap();
    assert_eq!(code.code(), Some(0));
    let tampered_path = dir.path().join("tampered.json");
    std::fs::write(&tampered_path, serde_json::to_string(&tampered).unwrap()).unwrap();
    let code = bin().arg("--replay").arg(&tampered_path).arg("--out").arg(dir.path().join("t")).arg("--quiet").status().unwrap();
    assert_eq!(code.code(), Some(1));
}

#[test]
fn schema_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &m1_config());
    let out = dir.path().join("o");
    harness::run(&cfg, Some(&out)).unwrap();
    let path = out.join(SUMMARY_FILE);
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["schema_version"] = serde_json::json!(99);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(read_summary(&path), Err(netctl::Error::VersionMismatch { expected: 1, found: 99 })));
    let code = bin().arg("--replay").arg(&path).arg("--quiet").status().unwrap();
    assert_eq!(code.code(), Some(2));
}

#[test]
fn repetitions_give_distinct_traces_with_one_schema() {
    let text = BASE.replace("seed = 3", "seed = 3\nrepetitions = 3");
    let art = harness::execute(&ExperimentConfig::from_toml_str(&text).unwrap()).unwrap();
    let mut per_run: Vec<Vec<&str>> = vec![Vec::new(); 3];
    for line in art.trace_csv.lines().skip(1) {
        let (id, rest) = line.split_once(',').unwrap();
        per_run[id.trim_start_matches("rep").parse::<usize>().unwrap()].push(rest);
        assert_eq!(line.split(',').count(), TRACE_HEADER.split(',').count());
    }
    assert_eq!(per_run[0].len(), 360);
    assert_ne!(per_run[0], per_run[1]);
    assert_ne!(per_run[1], per_run[2]);
    let seeds: Vec<u64> = art.summary.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![3, 4, 5]);
}

#[test]
fn cli_regret_equals_library_regret() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "c.toml", BASE);
    let out = dir.path().join("cli");
    let status = bin().arg("--config").arg(&cfg_path).arg("--out").arg(&out).arg("--quiet").status().unwrap();
    assert!(status.success());
    let summary = read_summary(&out.join(SUMMARY_FILE)).unwrap();
    let cli_regret = summary.runs[0].regret.as_ref().unwrap().mean;

    // library path, built by hand
    let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
    let kcfg = cfg.known_config(120, 3).unwrap();
    let trace = run_known(&kcfg).unwrap();
    let w = kcfg.noise.sequence(120);
    let sol = offline_optimal_dfc(&w, &kcfg.costs, &kcfg.set().unwrap(), &kcfg.sys, &kcfg.k, 120).unwrap();
    let j_star = dfc_rollout_cost(&sol.params, &kcfg.k, &kcfg.sys, &w, &kcfg.costs, 120).unwrap();
    assert_eq!(cli_regret, mean_regret(&trace, j_star).unwrap());
}

#[test]
fn overrides_change_seed_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[unknown]\nt_collect = 60\nt_exchange = 5\nq = \"auto\"\n");
    let cfg_path = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("o");
    let status = bin()
        .args(["--seed-override", "11", "--mode-override", "sysid_only", "--quiet"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary = read_summary(&out.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.config.seed, 11);
    let run = &summary.runs[0];
    assert!(run.sysid.is_some());
    let csv = std::fs::read_to_string(out.join(TRACE_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 60 * 3);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(3) == Some("explore")));
}

#[test]
fn unknown_mode_records_identification_and_phases() {
    let text = BASE
        .replace("mode = \"known\"", "mode = \"unknown\"")
        .replace("horizon = 120", "horizon = 300")
        + "\n[unknown]\nt_collect = 150\nt_exchange = \"auto\"\nq = \"auto\"\n";
    let art = harness::execute(&ExperimentConfig::from_toml_str(&text).unwrap()).unwrap();
    let run = &art.summary.runs[0];
    let tex = run.t_exchange.unwrap();
    assert_eq!(run.t_collect, Some(150));
    assert_eq!(run.q, Some(1));
    let phases: Vec<&str> = art.trace_csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(phases.len(), 300 * 3);
    assert!(phases[..450].iter().all(|p| *p == "explore"));
    assert!(phases[450..450 + 3 * tex].iter().all(|p| *p == "exchange"));
    assert!(phases[450 + 3 * tex..].iter().all(|p| *p == "learn"));
    assert!(run.sysid.as_ref().unwrap().eps.is_some());
    assert!(run.noise_bound.is_some());
    // resolved config materializes the identification defaults
    let u = art.summary.config.unknown.as_ref().unwrap();
    assert!(u.t_exchange.is_some_and(|s| !s.is_auto()));
}

#[test]
fn sweep_writes_slopes_csv_and_fitted_slope() {
    let text = BASE.replace("mode = \"known\"", "mode = \"sweep\"") + "\n[sweep]\nhorizons = [200, 400, 800, 1600]\n";
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", &text);
    let out = dir.path().join("o");
    let summary = harness::run(&cfg, Some(&out)).unwrap();
    let slopes = std::fs::read_to_string(out.join(SLOPES_FILE)).unwrap();
    let lines: Vec<&str> = slopes.lines().collect();
    assert_eq!(lines[0], "run_id,repetition,seed,T,j_star,regret_mean,regret_agent_0,regret_agent_1,regret_agent_2");
    assert_eq!(lines.len(), 1 + 4);
    let sweep = summary.sweep.unwrap();
    assert_eq!(sweep.fits.len(), 1);
    assert_eq!(sweep.median_slope, sweep.fits[0].slope);
    assert!(sweep.median_slope.is_finite());
    assert_eq!(summary.slopes_sha256.unwrap(), harness::sha256_hex(slopes.as_bytes()));
}

#[test]
fn divergence_and_numerical_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // a gain that does not stabilize the plant fails certification
    let text = BASE.replace("k = [[0.0, 0.0], [0.0, 0.0]]", "k = [[-1.0, 0.0], [0.0, -1.0]]");
    let cfg = write(dir.path(), "bad.toml", &text);
    let code = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("o")).arg("--quiet").status().unwrap();
    assert_eq!(code.code(), Some(3));
    assert_eq!(harness::exit_code(&netctl::Error::Diverged { t: 1, agent: 0, norm: 1e9, limit: 1.0 }), 4);
}
