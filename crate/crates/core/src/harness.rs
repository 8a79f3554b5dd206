//! Experiment orchestration and artifacts.
//!
//! A run writes `trace.csv` (one row per agent and round), `summary.json`
//! (resolved config, hashes, regret and identification diagnostics) and, in
//! sweep mode, `slopes.csv`. Everything here composes library calls; no
//! control or learning logic lives in this layer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{repetition_seed, Comparator, Dynamics, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::known::{self, ExperimentTrace, KnownRunConfig, Phase};
use crate::linalg::{self, Mat};
use crate::lti::StageCost;
use crate::regret::{self, PolicyGrid, SlopeFit};
use crate::sysid::{self, SysIdReport};
use crate::unknown::{self, NoiseBoundCheck};

pub const SCHEMA_VERSION: u32 = 1;

pub const TRACE_HEADER: &str = "run_id,t,agent,phase,cost,state_norm,action_norm,noise_err,consensus_dist";

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SLOPES_FILE: &str = "slopes.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRecord {
    pub objective: f64,
    pub pg_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub params_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub j_star: f64,
    pub index: usize,
    pub candidates: usize,
    #[serde(with = "linalg::rows")]
    pub k_star: Mat,
    pub per_agent: Vec<f64>,
    pub mean: f64,
}

/// Regret against the primary comparator (offline DFC when computed, the
/// linear grid otherwise); the grid result is reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub comparator: Comparator,
    pub j_star: f64,
    pub per_agent: Vec<f64>,
    pub mean: f64,
    pub offline: Option<OfflineRecord>,
    pub grid: Option<GridRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub repetition: usize,
    pub seed: u64,
    pub horizon: usize,
    pub h: usize,
    pub eta: f64,
    pub t_collect: Option<usize>,
    pub t_exchange: Option<usize>,
    pub q: Option<usize>,
    pub rows: usize,
    pub max_state_norm: f64,
    pub state_bound: f64,
    pub max_grad_norm: f64,
    pub final_consensus: Option<f64>,
    pub regret: Option<RegretRecord>,
    pub sysid: Option<SysIdReport>,
    pub noise_bound: Option<NoiseBoundCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub dynamics: Dynamics,
    pub horizons: Vec<usize>,
    /// One fit of log mean-regret on log T per repetition.
    pub fits: Vec<SlopeFit>,
    pub median_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub trace_sha256: String,
    pub slopes_sha256: Option<String>,
    pub runs: Vec<RunRecord>,
    pub sweep: Option<SweepRecord>,
}

/// Artifact contents before they touch the disk.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub trace_csv: String,
    pub slopes_csv: Option<String>,
    pub summary: Summary,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of a config.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

fn push_trace_rows(out: &mut String, run_id: &str, trace: &ExperimentTrace) {
    for r in &trace.rows {
        // Display for f64 is the shortest round-trip form, so output is stable.
        let _ = writeln!(
            out,
            "{run_id},{},{},{},{},{},{},{},{}",
            r.t,
            r.agent,
            r.phase.as_str(),
            r.cost,
            r.x.norm(),
            r.u.norm(),
            r.noise_err,
            r.consensus_dist
        );
    }
}

fn regret_record(
    cfg: &ExperimentConfig,
    kcfg: &KnownRunConfig,
    trace: &ExperimentTrace,
) -> Result<Option<RegretRecord>> {
    let comparator = cfg.regret.comparator;
    if comparator == Comparator::None {
        return Ok(None);
    }
    let t = kcfg.horizon;
    let noise = kcfg.noise.sequence(t);
    let per_agent = |j_star: f64| -> Result<Vec<f64>> {
        (0..trace.m).map(|j| regret::individual_regret(trace, j, j_star)).collect()
    };
    let offline = if matches!(comparator, Comparator::OfflineDfc | Comparator::Both) {
        let set = kcfg.set()?;
        let sol = regret::offline_optimal_dfc(&noise, &kcfg.costs, &set, &kcfg.sys, &kcfg.k, t)?;
        if !sol.converged {
            warn!("offline comparator stopped after {} iterations (pg norm {:e})", sol.iterations, sol.pg_norm);
        }
        let j_star = regret::dfc_rollout_cost(&sol.params, &kcfg.k, &kcfg.sys, &noise, &kcfg.costs, t)?;
        let rec = OfflineRecord {
            objective: sol.objective,
            pg_norm: sol.pg_norm,
            iterations: sol.iterations,
            converged: sol.converged,
            params_norm: sol.params.frobenius(),
        };
        Some((j_star, rec))
    } else {
        None
    };
    let grid = if matches!(comparator, Comparator::LinearGrid | Comparator::Both) {
        let g = PolicyGrid::axis(&kcfg.sys, &kcfg.k, cfg.regret.grid_radius, cfg.regret.grid_points)?;
        let choice = regret::best_linear_in_hindsight(&noise, &kcfg.costs, &g, &kcfg.sys, t)?;
        let per = per_agent(choice.j_star)?;
        Some(GridRecord {
            j_star: choice.j_star,
            index: choice.index,
            candidates: g.len(),
            k_star: choice.k_star,
            mean: regret::mean_regret(trace, choice.j_star)?,
            per_agent: per,
        })
    } else {
        None
    };
    let (j_star, offline) = match (offline, &grid) {
        (Some((j, rec)), _) => (j, Some(rec)),
        (None, Some(g)) => (g.j_star, None),
        (None, None) => unreachable!("comparator is not none"),
    };
    Ok(Some(RegretRecord {
        comparator,
        j_star,
        per_agent: per_agent(j_star)?,
        mean: regret::mean_regret(trace, j_star)?,
        offline,
        grid,
    }))
}

fn base_record(run_id: String, rep: usize, seed: u64, kcfg: &KnownRunConfig, trace: &ExperimentTrace) -> RunRecord {
    RunRecord {
        run_id,
        repetition: rep,
        seed,
        horizon: kcfg.horizon,
        h: kcfg.h,
        eta: kcfg.eta,
        t_collect: None,
        t_exchange: None,
        q: None,
        rows: trace.rows.len(),
        max_state_norm: trace.max_state_norm,
        state_bound: trace.state_bound,
        max_grad_norm: trace.max_grad_norm,
        final_consensus: trace.consensus.last().copied(),
        regret: None,
        sysid: None,
        noise_bound: None,
    }
}

fn run_known_once(cfg: &ExperimentConfig, run_id: String, rep: usize, horizon: usize, csv: &mut String) -> Result<RunRecord> {
    let seed = repetition_seed(cfg.seed, rep);
    let kcfg = cfg.known_config(horizon, seed)?;
    let trace = known::run_known(&kcfg)?;
    push_trace_rows(csv, &run_id, &trace);
    let mut rec = base_record(run_id, rep, seed, &kcfg, &trace);
    rec.regret = regret_record(cfg, &kcfg, &trace)?;
    Ok(rec)
}

fn run_unknown_once(cfg: &ExperimentConfig, run_id: String, rep: usize, horizon: usize, csv: &mut String) -> Result<RunRecord> {
    let seed = repetition_seed(cfg.seed, rep);
    let ucfg = cfg.unknown_config(horizon, seed)?;
    let run = unknown::run_unknown(&ucfg)?;
    push_trace_rows(csv, &run_id, &run.trace);
    let mut rec = base_record(run_id, rep, seed, &ucfg.base, &run.trace);
    rec.t_collect = Some(ucfg.t_collect);
    rec.t_exchange = Some(ucfg.t_exchange);
    rec.q = Some(ucfg.q);
    rec.regret = regret_record(cfg, &ucfg.base, &run.trace)?;
    rec.noise_bound = Some(run.noise_bound_check());
    rec.sysid = Some(run.report);
    Ok(rec)
}

/// Collection and exchange without a control phase; the trace holds the
/// exploration rounds.
fn run_sysid_once(cfg: &ExperimentConfig, run_id: String, rep: usize, csv: &mut String) -> Result<RunRecord> {
    let seed = repetition_seed(cfg.seed, rep);
    let kcfg = cfg.known_config(cfg.run.horizon, seed)?;
    let ucfg = cfg.unknown_config_unchecked(cfg.run.horizon, &kcfg)?;
    let m = kcfg.m();
    let probe = sysid::explore_collect_with(&kcfg.sys, &kcfg.k, ucfg.t_collect, m, ucfg.probe_seed, |i, t| {
        kcfg.world_noise(i, t)
    })?;
    let mut max_state: f64 = 0.0;
    for t in 1..=ucfg.t_collect {
        for i in 0..m {
            let x = &probe.states[i][t - 1];
            let u = -(&kcfg.k * x) + &probe.probes[i][t - 1];
            max_state = max_state.max(x.norm());
            let _ = writeln!(
                csv,
                "{run_id},{t},{i},{},{},{},{},{},0",
                Phase::Explore.as_str(),
                kcfg.costs.network(t, x, &u),
                x.norm(),
                u.norm(),
                kcfg.world_noise(i, t).norm()
            );
        }
    }
    let stacks = sysid::moment_estimates(&probe, ucfg.q)?;
    let stacks = sysid::consensus_exchange(&stacks, &kcfg.mixing, ucfg.t_exchange)?;
    let estimates = stacks
        .iter()
        .map(|s| sysid::recover_system(s, &kcfg.k, ucfg.q))
        .collect::<Result<Vec<_>>>()?;
    let report = sysid::build_report(
        estimates,
        Some(&kcfg.sys),
        ucfg.t_collect,
        ucfg.t_exchange,
        ucfg.q,
        ucfg.report_constants(),
    );
    Ok(RunRecord {
        run_id,
        repetition: rep,
        seed,
        horizon: kcfg.horizon,
        h: kcfg.h,
        eta: kcfg.eta,
        t_collect: Some(ucfg.t_collect),
        t_exchange: Some(ucfg.t_exchange),
        q: Some(ucfg.q),
        rows: m * ucfg.t_collect,
        max_state_norm: max_state,
        state_bound: sysid::exploration_state_bound(
            known::effective_kappa(&kcfg.cert, &kcfg.sys),
            kcfg.cert.gamma,
            kcfg.noise.w,
            kcfg.sys.d2(),
        ),
        max_grad_norm: 0.0,
        final_consensus: Some(sysid::stack_deviation(&stacks)),
        regret: None,
        sysid: Some(report),
        noise_bound: None,
    })
}

fn slopes_csv(m: usize, runs: &[RunRecord]) -> String {
    let mut out = String::from("run_id,repetition,seed,T,j_star,regret_mean");
    for j in 0..m {
        let _ = write!(out, ",regret_agent_{j}");
    }
    out.push('\n');
    for r in runs {
        let reg = r.regret.as_ref().expect("sweep runs carry regret");
        let _ = write!(out, "{},{},{},{},{},{}", r.run_id, r.repetition, r.seed, r.horizon, reg.j_star, reg.mean);
        for v in &reg.per_agent {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Runs the experiment described by `cfg` in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let resolved = cfg.resolve()?;
    let cfg = &resolved;
    let mut csv = String::from(TRACE_HEADER);
    csv.push('\n');
    let mut runs = Vec::new();
    let mut sweep = None;
    let mut slopes = None;
    match cfg.mode {
        Mode::Known | Mode::Unknown | Mode::SysidOnly => {
            for rep in 0..cfg.repetitions {
                let id = format!("rep{rep}");
                let rec = match cfg.mode {
                    Mode::Known => run_known_once(cfg, id, rep, cfg.run.horizon, &mut csv)?,
                    Mode::Unknown => run_unknown_once(cfg, id, rep, cfg.run.horizon, &mut csv)?,
                    _ => run_sysid_once(cfg, id, rep, &mut csv)?,
                };
                info!("{}: {} rows", rec.run_id, rec.rows);
                runs.push(rec);
            }
        }
        Mode::Sweep => {
            if cfg.regret.comparator == Comparator::None {
                return Err(Error::config("regret.comparator", "sweep mode needs a comparator"));
            }
            let s = cfg.sweep.as_ref().expect("validated");
            let mut fits = Vec::new();
            for rep in 0..cfg.repetitions {
                let mut points = Vec::new();
                for &t in &s.horizons {
                    let id = format!("T{t}_rep{rep}");
                    let rec = match s.dynamics {
                        Dynamics::Known => run_known_once(cfg, id, rep, t, &mut csv)?,
                        Dynamics::Unknown => run_unknown_once(cfg, id, rep, t, &mut csv)?,
                    };
                    let mean = rec.regret.as_ref().expect("comparator set").mean;
                    info!("{}: mean regret {mean:.4}", rec.run_id);
                    points.push((t as f64, mean));
                    runs.push(rec);
                }
                fits.push(regret::regret_slope_floored(&points, s.regret_floor)?);
            }
            let mut sorted: Vec<f64> = fits.iter().map(|f| f.slope).collect();
            sorted.sort_by(f64::total_cmp);
            sweep = Some(SweepRecord {
                dynamics: s.dynamics,
                horizons: s.horizons.clone(),
                median_slope: median_sorted(&sorted),
                fits,
            });
            slopes = Some(slopes_csv(cfg.network.agents, &runs));
        }
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        config_sha256: config_hash(cfg)?,
        trace_sha256: sha256_hex(csv.as_bytes()),
        slopes_sha256: slopes.as_ref().map(|s: &String| sha256_hex(s.as_bytes())),
        config: resolved.clone(),
        runs,
        sweep,
    };
    Ok(Artifacts { trace_csv: csv, slopes_csv: slopes, summary })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn write_artifacts(art: &Artifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(TRACE_FILE), &art.trace_csv)?;
    if let Some(s) = &art.slopes_csv {
        std::fs::write(dir.join(SLOPES_FILE), s)?;
    }
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&art.summary)?)?;
    Ok(())
}

/// Output directory: explicit override, then the config's `out`, then `./out`.
pub fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Loads, runs and writes artifacts; returns the summary.
pub fn run(config_path: &Path, out: Option<&Path>) -> Result<Summary> {
    let cfg = ExperimentConfig::load(config_path)?;
    let art = execute(&cfg)?;
    write_artifacts(&art, &output_dir(&cfg, out))?;
    Ok(art.summary)
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    /// The echoed config still hashes to the recorded value.
    pub config_matches: bool,
    /// The re-run trace hashes to the recorded value.
    pub trace_matches: bool,
    pub expected_trace_sha256: String,
    pub actual_trace_sha256: String,
    pub artifacts: Artifacts,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.config_matches && self.trace_matches
    }
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::VersionMismatch { expected: SCHEMA_VERSION, found });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Re-runs the echoed config of a summary and compares checksums.
pub fn replay(summary: &Summary) -> Result<ReplayReport> {
    if summary.schema_version != SCHEMA_VERSION {
        return Err(Error::VersionMismatch { expected: SCHEMA_VERSION, found: summary.schema_version });
    }
    let art = execute(&summary.config)?;
    Ok(ReplayReport {
        config_matches: config_hash(&summary.config)? == summary.config_sha256,
        trace_matches: art.summary.trace_sha256 == summary.trace_sha256,
        expected_trace_sha256: summary.trace_sha256.clone(),
        actual_trace_sha256: art.summary.trace_sha256.clone(),
        artifacts: art,
    })
}

/// Process exit code for an error: 2 config, 3 numerical, 4 divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::VersionMismatch { .. } | Error::Io(_) => 2,
        Error::Diverged { .. } => 4,
        _ => 3,
    }
}
