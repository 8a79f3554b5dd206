//! Distributed DFC with known dynamics: every agent acts with its own DFC,
//! recovers the disturbance, takes a gossip + gradient step on its local
//! surrogate cost and projects back onto the constraint set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfc::{self, ClosedLoop, DfcParams, DfcSet, GradientMethod};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{self, CostStream, NoiseHistory, NoiseSchedule, StageCost, SystemParams};
use crate::network::MixingMatrix;
use crate::stability::{self, StabilityCertificate};

/// States beyond this multiple of the state bound abort the run.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Explore,
    Exchange,
    Learn,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Exchange => "exchange",
            Phase::Learn => "learn",
        }
    }
}

/// Whether all agents see one disturbance sequence or draw their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Shared,
    Independent,
}

/// Common initial DFC for every agent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitMode {
    #[default]
    Zero,
    /// Seeded draw, projected onto the constraint set.
    Random { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct KnownRunConfig {
    pub sys: SystemParams,
    pub k: Mat,
    pub cert: StabilityCertificate,
    pub mixing: MixingMatrix,
    pub horizon: usize,
    pub h: usize,
    pub eta: f64,
    pub noise: NoiseSchedule,
    pub noise_mode: NoiseMode,
    pub costs: CostStream,
    pub init: InitMode,
    pub gradient: GradientMethod,
    /// Radius scale `C` of the constraint set; `2 kappa^3` by default.
    pub set_c: f64,
    /// Decay `gamma` of the constraint set; the certificate's by default.
    pub set_gamma: f64,
}

/// `ceil(2 ln T / gamma)`, at least 1.
pub fn default_h(horizon: usize, gamma: f64) -> usize {
    ((2.0 * (horizon.max(2) as f64).ln() / gamma).ceil() as usize).max(1)
}

/// `1 / sqrt(T)`.
pub fn default_eta(horizon: usize) -> f64 {
    1.0 / (horizon.max(1) as f64).sqrt()
}

/// `max(kappa, |A|, |B|)`: the certificate's kappa also bounding the system.
pub fn effective_kappa(cert: &StabilityCertificate, sys: &SystemParams) -> f64 {
    cert.kappa.max(linalg::spectral_norm(&sys.a)).max(linalg::spectral_norm(&sys.b))
}

impl KnownRunConfig {
    /// Certifies `k` (or a Riccati stabilizer when `None`) and fills in the
    /// default `H`, `eta` and constraint set.
    pub fn new(
        sys: SystemParams,
        k: Option<Mat>,
        mixing: MixingMatrix,
        costs: CostStream,
        noise: NoiseSchedule,
        horizon: usize,
    ) -> Result<Self> {
        let k = match k {
            Some(k) => k,
            None => stability::synthesize_stabilizer(&sys)?,
        };
        let cert = stability::certify_strong_stability(&k, &sys)?;
        Ok(KnownRunConfig {
            h: default_h(horizon, cert.gamma),
            eta: default_eta(horizon),
            set_c: 2.0 * cert.kappa.powi(3),
            set_gamma: cert.gamma,
            sys,
            k,
            cert,
            mixing,
            horizon,
            noise,
            noise_mode: NoiseMode::Shared,
            costs,
            init: InitMode::Zero,
            gradient: GradientMethod::Analytic,
        })
    }

    pub fn m(&self) -> usize {
        self.mixing.m()
    }

    pub fn set(&self) -> Result<DfcSet> {
        DfcSet::new(self.set_c, self.set_gamma, self.h)
    }

    /// State bound `D` for DFCs in the constraint set.
    pub fn state_bound(&self) -> f64 {
        let kappa = effective_kappa(&self.cert, &self.sys);
        dfc::state_bound(
            kappa,
            self.cert.gamma,
            linalg::spectral_norm(&self.sys.b),
            self.set_c,
            self.h,
            self.noise.w,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.h == 0 {
            return Err(Error::config("h", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.costs.m != self.m() {
            return Err(Error::config(
                "costs.m",
                format!("cost stream has {} agents, mixing matrix {}", self.costs.m, self.m()),
            ));
        }
        if self.noise.d1 != self.sys.d1() {
            return Err(Error::config("noise", "dimension differs from the state dimension"));
        }
        self.costs.validate(self.sys.d1(), self.sys.d2())?;
        self.cert.verify(&self.k, &self.sys)
    }

    pub(crate) fn initial_params(&self, set: &DfcSet) -> Result<DfcParams> {
        let (d1, d2) = (self.sys.d1(), self.sys.d2());
        match self.init {
            InitMode::Zero => Ok(DfcParams::zeros(self.h, d2, d1)),
            InitMode::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let blocks = (0..self.h)
                    .map(|i| Mat::from_fn(d2, d1, |_, _| rng.gen_range(-1.0..1.0)) * set.radius(i))
                    .collect();
                dfc::project_to_set(&DfcParams::from_blocks(blocks)?, set)
            }
        }
    }

    /// Disturbance hitting agent `agent` at round `t`.
    pub fn world_noise(&self, agent: usize, t: usize) -> Vector {
        match self.noise_mode {
            NoiseMode::Shared => self.noise.noise_at(t as i64),
            NoiseMode::Independent => self.noise.for_agent(agent).noise_at(t as i64),
        }
    }
}

/// One agent in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub agent: usize,
    pub phase: Phase,
    pub x: Vector,
    pub u: Vector,
    /// True disturbance `w_t`.
    pub w: Vector,
    /// Network cost `sum_i c_{i,t}(x, u)` at this agent's state and action.
    pub cost: f64,
    /// `|w_hat - w|` for this agent; zero with known dynamics up to rounding.
    pub noise_err: f64,
    /// `max_i |M_{i,t+1} - mean_j M_{j,t+1}|_F` after this round's update.
    pub consensus_dist: f64,
    /// FNV-1a hash of the agent's DFC used in this round.
    pub m_hash: u64,
}

/// Everything recorded by a run, rows ordered by round then agent.
#[derive(Debug, Clone)]
pub struct ExperimentTrace {
    pub m: usize,
    pub horizon: usize,
    pub rows: Vec<TraceRow>,
    /// Per learning round: consensus distance after the update.
    pub consensus: Vec<f64>,
    /// Per learning round: `2 eta G sqrt(m) / (1 - beta)` with `G` the largest
    /// gradient norm seen so far.
    pub consensus_bound: Vec<f64>,
    pub max_grad_norm: f64,
    pub max_state_norm: f64,
    pub state_bound: f64,
    pub final_params: Vec<DfcParams>,
    pub set: Option<DfcSet>,
    pub h: usize,
    pub eta: f64,
}

impl ExperimentTrace {
    pub(crate) fn new(m: usize, horizon: usize, h: usize, eta: f64, state_bound: f64) -> Self {
        ExperimentTrace {
            m,
            horizon,
            rows: Vec::with_capacity(m * horizon),
            consensus: Vec::new(),
            consensus_bound: Vec::new(),
            max_grad_norm: 0.0,
            max_state_norm: 0.0,
            state_bound,
            final_params: Vec::new(),
            set: None,
            h,
            eta,
        }
    }

    pub fn row(&self, t: usize, agent: usize) -> Option<&TraceRow> {
        let idx = (t.checked_sub(1)?) * self.m + agent;
        self.rows.get(idx).filter(|r| r.t == t && r.agent == agent)
    }

    pub fn agent_rows(&self, agent: usize) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.agent == agent)
    }

    /// `J_T^j`: accumulated network cost along agent `j`'s trajectory.
    pub fn agent_cost(&self, agent: usize) -> f64 {
        self.agent_rows(agent).map(|r| r.cost).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.m * self.horizon
    }

    /// Rounds where the measured consensus distance exceeded its bound.
    pub fn consensus_violations(&self) -> usize {
        self.consensus
            .iter()
            .zip(&self.consensus_bound)
            .filter(|(d, b)| **d > **b * (1.0 + 1e-9) + 1e-12)
            .count()
    }
}

pub(crate) fn params_hash(m: &DfcParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in &m.blocks {
        for v in b.iter() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// `M_hat_i = sum_j P_ji M_j - eta g_i` for every agent.
pub fn gossip_step(iterates: &[DfcParams], p: &MixingMatrix, grads: &[DfcParams], eta: f64) -> Result<Vec<DfcParams>> {
    let m = p.m();
    if iterates.len() != m || grads.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} iterates and {} gradients for {m} agents",
            iterates.len(),
            grads.len()
        )));
    }
    let shape = &iterates[0];
    if iterates.iter().chain(grads).any(|x| !x.same_shape(shape)) {
        return Err(Error::DimensionMismatch("DFC shapes differ across agents".into()));
    }
    Ok((0..m)
        .map(|i| {
            let mut out = grads[i].scaled(-eta);
            for (j, mj) in iterates.iter().enumerate() {
                let w = p.weight(j, i);
                if w != 0.0 {
                    out.axpy(w, mj);
                }
            }
            out
        })
        .collect())
}

/// `max_i |M_i - mean|_F`.
pub fn consensus_distance(params: &[DfcParams]) -> f64 {
    if params.is_empty() {
        return 0.0;
    }
    let mut mean = DfcParams::zeros(params[0].h, params[0].d2, params[0].d1);
    for p in params {
        mean.axpy(1.0 / params.len() as f64, p);
    }
    params.iter().map(|p| p.distance(&mean)).fold(0.0, f64::max)
}

/// Mutable per-agent state carried across rounds.
pub(crate) struct Agents {
    pub x: Vec<Vector>,
    pub params: Vec<DfcParams>,
    pub history: Vec<NoiseHistory>,
}

/// The learning loop, shared by the known and unknown cases. `models[i]` is
/// agent `i`'s view of `(A, B, K)` used for noise recovery and gradients; the
/// world always evolves with the true system.
pub(crate) fn learn_rounds(
    cfg: &KnownRunConfig,
    models: &[ClosedLoop],
    set: &DfcSet,
    agents: &mut Agents,
    rounds: std::ops::RangeInclusive<usize>,
    trace: &mut ExperimentTrace,
) -> Result<()> {
    let m = cfg.m();
    let h = cfg.h;
    let limit = DIVERGENCE_FACTOR * trace.state_bound;
    let beta = cfg.mixing.beta;
    let consensus_scale = 2.0 * cfg.eta * (m as f64).sqrt() / (1.0 - beta).max(1e-300);
    for t in rounds {
        let mut grads = Vec::with_capacity(m);
        let first_row = trace.rows.len();
        for i in 0..m {
            let x = agents.x[i].clone();
            let norm = x.norm();
            trace.max_state_norm = trace.max_state_norm.max(norm);
            if !norm.is_finite() || norm > limit {
                return Err(Error::Diverged { t, agent: i, norm, limit });
            }
            let past = agents.history[i].recent(h);
            let u = dfc::dfc_action(&cfg.k, &x, &agents.params[i], &past)?;
            let cost = cfg.costs.network(t, &x, &u);
            let w = cfg.world_noise(i, t);
            let x_next = lti::step(&x, &u, &w, &cfg.sys)?;
            let w_hat = lti::recover_noise(&x_next, &x, &u, &models[i].sys)?;
            let noise_err = (&w_hat - &w).norm();
            agents.history[i].push(w_hat);
            let window = agents.history[i].recent(2 * h + 1);
            let g = dfc::grad_surrogate_cost(&cfg.costs, i, t, &models[i], &agents.params[i], &window, cfg.gradient)?;
            trace.max_grad_norm = trace.max_grad_norm.max(g.frobenius());
            grads.push(g);
            trace.rows.push(TraceRow {
                t,
                agent: i,
                phase: Phase::Learn,
                x,
                u,
                w,
                cost,
                noise_err,
                consensus_dist: 0.0,
                m_hash: params_hash(&agents.params[i]),
            });
            agents.x[i] = x_next;
        }
        let mixed = gossip_step(&agents.params, &cfg.mixing, &grads, cfg.eta)?;
        agents.params = mixed.iter().map(|p| dfc::project_to_set(p, set)).collect::<Result<_>>()?;
        let dist = consensus_distance(&agents.params);
        for row in &mut trace.rows[first_row..] {
            row.consensus_dist = dist;
        }
        trace.consensus.push(dist);
        trace.consensus_bound.push(consensus_scale * trace.max_grad_norm);
    }
    Ok(())
}

/// Runs the known-dynamics algorithm for `cfg.horizon` rounds from `x_1 = 0`.
pub fn run_known(cfg: &KnownRunConfig) -> Result<ExperimentTrace> {
    cfg.validate()?;
    let set = cfg.set()?;
    let m = cfg.m();
    let (d1, h) = (cfg.sys.d1(), cfg.h);
    let init = cfg.initial_params(&set)?;
    let model = ClosedLoop::new(&cfg.sys, &cfg.k, h)?;
    let models = vec![model; m];
    let mut agents = Agents {
        x: vec![Vector::zeros(d1); m],
        params: vec![init; m],
        history: vec![NoiseHistory::new(d1, 2 * h + 1); m],
    };
    let mut trace = ExperimentTrace::new(m, cfg.horizon, h, cfg.eta, cfg.state_bound());
    learn_rounds(cfg, &models, &set, &mut agents, 1..=cfg.horizon, &mut trace)?;
    trace.final_params = agents.params;
    trace.set = Some(set);
    log::debug!(
        "known run: T={} m={} H={} max|x|={:.3} D={:.3}",
        cfg.horizon,
        m,
        h,
        trace.max_state_norm,
        trace.state_bound
    );
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::NoiseKind;
    use crate::network::{build_topology, metropolis_weights, TopologyKind};

    fn desk_sys() -> SystemParams {
        SystemParams::new(
            Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            Mat::identity(2, 2),
        )
        .unwrap()
    }

    fn uniform(m: usize) -> MixingMatrix {
        MixingMatrix::from_matrix(Mat::from_element(m, m, 1.0 / m as f64)).unwrap()
    }

    fn config(m: usize, mixing: MixingMatrix, costs: CostStream, t: usize) -> KnownRunConfig {
        let noise = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 3, 2);
        let mut cfg = KnownRunConfig::new(desk_sys(), Some(Mat::zeros(2, 2)), mixing, costs, noise, t).unwrap();
        cfg.h = 6;
        let _ = m;
        cfg
    }

    fn hetero_costs(m: usize) -> CostStream {
        CostStream::drifting(m, Mat::identity(2, 2) * 2.0, Mat::identity(2, 2) * 0.5, 1.0, 0.05, 0.3)
    }

    #[test]
    fn gossip_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let iters: Vec<DfcParams> = (0..3)
            .map(|_| DfcParams::from_blocks(vec![Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)); 2]).unwrap())
            .collect();
        let zeros = vec![DfcParams::zeros(2, 2, 2); 3];
        let ident = MixingMatrix::from_matrix(Mat::identity(3, 3)).unwrap();
        assert_eq!(gossip_step(&iters, &ident, &zeros, 0.0).unwrap(), iters);
        let avg = gossip_step(&iters, &uniform(3), &zeros, 0.0).unwrap();
        assert!(consensus_distance(&avg) < 1e-15);
    }

    #[test]
    fn gossip_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = build_topology(TopologyKind::Ring, 5, 0).unwrap();
        let p = metropolis_weights(&g).unwrap();
        let rand_params = |rng: &mut ChaCha8Rng| {
            DfcParams::from_blocks((0..3).map(|_| Mat::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0))).collect()).unwrap()
        };
        let iters: Vec<_> = (0..5).map(|_| rand_params(&mut rng)).collect();
        let grads: Vec<_> = (0..5).map(|_| rand_params(&mut rng)).collect();
        let eta = 0.3;
        let got = gossip_step(&iters, &p, &grads, eta).unwrap();
        for i in 0..5 {
            for r in 0..3 {
                for a in 0..2 {
                    for b in 0..3 {
                        let mut acc = 0.0;
                        for j in 0..5 {
                            acc += p.p[(j, i)] * iters[j].blocks[r][(a, b)];
                        }
                        acc -= eta * grads[i].blocks[r][(a, b)];
                        assert!((got[i].blocks[r][(a, b)] - acc).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_costs_keep_agents_identical() {
        let costs = CostStream::tracking(4, Mat::identity(2, 2), Mat::identity(2, 2), 0.0, 0.0);
        let cfg = config(4, uniform(4), costs, 200);
        let trace = run_known(&cfg).unwrap();
        for t in 1..=200 {
            let h0 = trace.row(t, 0).unwrap().m_hash;
            assert!((1..4).all(|i| trace.row(t, i).unwrap().m_hash == h0));
        }
        assert!(trace.consensus.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn ring_consensus_within_bound() {
        let g = build_topology(TopologyKind::Ring, 5, 0).unwrap();
        let cfg = config(5, metropolis_weights(&g).unwrap(), hetero_costs(5), 600);
        let trace = run_known(&cfg).unwrap();
        assert!(trace.is_complete());
        assert_eq!(trace.consensus_violations(), 0);
        assert!(trace.consensus.iter().any(|&d| d > 0.0));
        let set = trace.set.unwrap();
        assert!(trace.final_params.iter().all(|p| set.contains(p, 1e-9)));
        assert!(trace.max_state_norm <= trace.state_bound * 1.05);
        assert!(trace.rows.iter().all(|r| r.noise_err < 1e-12 && r.cost.is_finite()));
    }

    #[test]
    fn deterministic_across_runs() {
        let g = build_topology(TopologyKind::Ring, 3, 0).unwrap();
        let cfg = config(3, metropolis_weights(&g).unwrap(), hetero_costs(3), 150);
        let a = run_known(&cfg).unwrap();
        let b = run_known(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn missing_eta_rejected() {
        let mut cfg = config(1, uniform(1), hetero_costs(1), 10);
        cfg.eta = 0.0;
        assert!(matches!(run_known(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn default_knobs() {
        assert_eq!(default_h(10_000, 0.5), (4.0 * 10_000f64.ln()).ceil() as usize);
        assert!((default_eta(400) - 0.05).abs() < 1e-15);
    }
}
