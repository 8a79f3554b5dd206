//! Explore-then-commit with unknown dynamics: probe and identify `(A, B)`
//! jointly, then run the learning loop where each agent recovers
//! disturbances and differentiates its surrogate cost with its own estimate.

use serde::{Deserialize, Serialize};

use crate::dfc::ClosedLoop;
use crate::error::{Error, Result};
use crate::known::{self, Agents, ExperimentTrace, KnownRunConfig, Phase, TraceRow, DIVERGENCE_FACTOR};
use crate::linalg::{check_dims, check_len, Mat, Vector};
use crate::lti::{self, mix_seed, NoiseHistory, StageCost, SystemParams};
use crate::stability;
use crate::sysid::{self, MomentStack, Prober, ReportConstants, SysIdReport};

#[derive(Debug, Clone)]
pub struct UnknownRunConfig {
    pub base: KnownRunConfig,
    pub t_collect: usize,
    pub t_exchange: usize,
    pub q: usize,
    /// Failure probability quoted in the identification report.
    pub delta: f64,
    pub probe_seed: u64,
    /// Skip identification and hand every agent the true system.
    pub oracle: bool,
}

/// `ceil(T^{2/3})`.
pub fn default_t_collect(horizon: usize) -> usize {
    (horizon as f64).powf(2.0 / 3.0).ceil() as usize
}

impl UnknownRunConfig {
    /// Defaults: `T_collect = ceil(T^{2/3})`, `T_exchange = ceil(ln T / ln(1/beta))`,
    /// `q` the controllability index of the true pair.
    pub fn new(base: KnownRunConfig) -> Result<Self> {
        let q = stability::controllability_index(&base.sys.a, &base.sys.b)
            .ok_or(Error::RankDeficient { sigma_min: 0.0 })?;
        Ok(UnknownRunConfig {
            t_collect: default_t_collect(base.horizon),
            t_exchange: sysid::default_t_exchange(base.horizon, base.mixing.beta),
            q,
            delta: 0.05,
            probe_seed: mix_seed(base.noise.seed, 0x7072_6f62),
            oracle: false,
            base,
        })
    }

    /// `T_0 = T_collect + T_exchange` (zero in oracle mode).
    pub fn t0(&self) -> usize {
        if self.oracle {
            0
        } else {
            self.t_collect + self.t_exchange
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.q == 0 {
            return Err(Error::config("q", "must be at least 1"));
        }
        if !self.oracle {
            if self.t_collect <= self.q + 1 {
                return Err(Error::config("t_collect", format!("must exceed q + 1 = {}", self.q + 1)));
            }
            if self.t0() >= self.base.horizon {
                return Err(Error::config(
                    "t_collect",
                    format!("T_collect + T_exchange = {} must be below T = {}", self.t0(), self.base.horizon),
                ));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn report_constants(&self) -> ReportConstants {
        ReportConstants {
            kappa: known::effective_kappa(&self.base.cert, &self.base.sys),
            gamma: self.base.cert.gamma,
            w: self.base.noise.w,
            delta: self.delta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnknownRun {
    pub trace: ExperimentTrace,
    pub report: SysIdReport,
    /// Per learning round and agent, `|w_t - w_hat_{i,t}|`; its maximum is
    /// compared against `zeta * eps`.
    pub max_noise_err: f64,
    /// Largest per-round violation of `x_{t+1} = A_hat x + B_hat u + w_hat`
    /// over all agents in the learning phase.
    pub equivalent_world_residual: f64,
}

/// `w_hat = x_{t+1} - A_hat x_t - B_hat u_t`.
pub fn estimate_noise(x_next: &Vector, x: &Vector, u: &Vector, a_hat: &Mat, b_hat: &Mat) -> Result<Vector> {
    let d1 = x.len();
    check_dims("A_hat", a_hat.shape(), (d1, d1))?;
    check_dims("B_hat", (b_hat.nrows(), 0), (d1, 0))?;
    check_len("x_next", x_next.len(), d1)?;
    check_len("u", u.len(), b_hat.ncols())?;
    Ok(x_next - a_hat * x - b_hat * u)
}

/// Probing plus moment exchange over rounds `1..=T_0`; returns per-agent
/// estimates and leaves `agents.x` at `x_{i,T_0+1}`.
fn explore_phase(cfg: &UnknownRunConfig, agents: &mut Agents, trace: &mut ExperimentTrace) -> Result<Vec<(Mat, Mat)>> {
    let base = &cfg.base;
    let m = base.m();
    let (d1, d2) = (base.sys.d1(), base.sys.d2());
    let kappa = known::effective_kappa(&base.cert, &base.sys);
    let limit = DIVERGENCE_FACTOR * sysid::exploration_state_bound(kappa, base.cert.gamma, base.noise.w, d2);
    let mut prober = Prober::new(cfg.probe_seed, m, d2);
    let mut states: Vec<Vec<Vector>> = vec![Vec::with_capacity(cfg.t_collect); m];
    let mut probes: Vec<Vec<Vector>> = vec![Vec::with_capacity(cfg.t_collect); m];
    let mut stacks: Vec<MomentStack> = Vec::new();
    for t in 1..=cfg.t0() {
        let phase = if t <= cfg.t_collect { Phase::Explore } else { Phase::Exchange };
        if t == cfg.t_collect + 1 {
            stacks = (0..m)
                .map(|i| sysid::agent_moments(&states[i], &probes[i], cfg.q))
                .collect::<Result<_>>()?;
        }
        if phase == Phase::Exchange {
            stacks = sysid::exchange_round(&stacks, &base.mixing)?;
        }
        let dist = if phase == Phase::Exchange { sysid::stack_deviation(&stacks) } else { 0.0 };
        for i in 0..m {
            let x = agents.x[i].clone();
            let norm = x.norm();
            trace.max_state_norm = trace.max_state_norm.max(norm);
            if !norm.is_finite() || norm > limit {
                return Err(Error::Diverged { t, agent: i, norm, limit });
            }
            let xi = prober.draw(i);
            let u = -(&base.k * &x) + &xi;
            let cost = base.costs.network(t, &x, &u);
            let w = base.world_noise(i, t);
            let x_next = lti::step(&x, &u, &w, &base.sys)?;
            if phase == Phase::Explore {
                states[i].push(x.clone());
                probes[i].push(xi);
            }
            trace.rows.push(TraceRow {
                t,
                agent: i,
                phase,
                x,
                u,
                noise_err: w.norm(),
                w,
                cost,
                consensus_dist: dist,
                m_hash: 0,
            });
            agents.x[i] = x_next;
        }
    }
    if stacks.is_empty() {
        // T_exchange = 0: moments are formed after the last collection round.
        stacks = (0..m)
            .map(|i| sysid::agent_moments(&states[i], &probes[i], cfg.q))
            .collect::<Result<_>>()?;
    }
    debug_assert!(agents.x.iter().all(|x| x.len() == d1));
    stacks.iter().map(|s| sysid::recover_system(s, &base.k, cfg.q)).collect()
}

/// Runs both phases for `cfg.base.horizon` rounds from `x_1 = 0`.
pub fn run_unknown(cfg: &UnknownRunConfig) -> Result<UnknownRun> {
    cfg.validate()?;
    let base = &cfg.base;
    let m = base.m();
    let (d1, h) = (base.sys.d1(), base.h);
    let set = base.set()?;
    let mut agents = Agents {
        x: vec![Vector::zeros(d1); m],
        params: vec![base.initial_params(&set)?; m],
        history: vec![NoiseHistory::new(d1, 2 * h + 1); m],
    };
    let mut trace = ExperimentTrace::new(m, base.horizon, h, base.eta, base.state_bound());
    let estimates = if cfg.oracle {
        vec![(base.sys.a.clone(), base.sys.b.clone()); m]
    } else {
        explore_phase(cfg, &mut agents, &mut trace)?
    };
    let report = sysid::build_report(
        estimates.clone(),
        Some(&base.sys),
        cfg.t_collect,
        cfg.t_exchange,
        cfg.q,
        cfg.report_constants(),
    );

    let kappa = known::effective_kappa(&base.cert, &base.sys);
    let margin = base.cert.gamma / (2.0 * kappa.powi(3));
    let eps = report.eps.clone().unwrap_or_default();
    let mut models = Vec::with_capacity(m);
    for (i, (a_hat, b_hat)) in estimates.into_iter().enumerate() {
        if eps[i] >= margin {
            return Err(Error::EstimateUnusable { agent: i, eps: eps[i], limit: margin });
        }
        let est = SystemParams::new(a_hat, b_hat)?;
        stability::certify_strong_stability(&base.k, &est)
            .map_err(|_| Error::EstimateUnusable { agent: i, eps: eps[i], limit: margin })?;
        models.push(ClosedLoop::new(&est, &base.k, h)?);
    }

    let first_learn_row = trace.rows.len();
    known::learn_rounds(base, &models, &set, &mut agents, cfg.t0() + 1..=base.horizon, &mut trace)?;
    trace.final_params = agents.params;
    trace.set = Some(set);

    let mut max_noise_err: f64 = 0.0;
    let mut residual: f64 = 0.0;
    let learn_rows = &trace.rows[first_learn_row..];
    for (idx, row) in learn_rows.iter().enumerate() {
        max_noise_err = max_noise_err.max(row.noise_err);
        // The next round's row for the same agent holds x_{t+1}.
        if let Some(next) = learn_rows.get(idx + m) {
            let model = &models[row.agent].sys;
            let w_hat = estimate_noise(&next.x, &row.x, &row.u, &model.a, &model.b)?;
            let rebuilt = &model.a * &row.x + &model.b * &row.u + &w_hat;
            residual = residual.max((rebuilt - &next.x).norm());
        }
    }
    Ok(UnknownRun { trace, report, max_noise_err, equivalent_world_residual: residual })
}

/// Noise-estimate error against its `zeta * eps` bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBoundCheck {
    pub eps: f64,
    pub eps_limit: f64,
    pub zeta: f64,
    pub max_noise_err: f64,
    pub precondition_holds: bool,
    pub bound_holds: bool,
}

impl UnknownRun {
    pub fn noise_bound_check(&self) -> NoiseBoundCheck {
        let eps = self.report.eps_max().unwrap_or(f64::NAN);
        NoiseBoundCheck {
            eps,
            eps_limit: self.report.eps_limit,
            zeta: self.report.zeta,
            max_noise_err: self.max_noise_err,
            precondition_holds: eps <= self.report.eps_limit,
            bound_holds: self.max_noise_err <= self.report.zeta * eps,
        }
    }
}
