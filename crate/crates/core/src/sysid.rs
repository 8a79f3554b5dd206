//! Distributed system identification: Rademacher probing on top of a
//! stabilizing controller, per-agent cross-moment estimates, gossip averaging
//! of the moments, and least-squares recovery of `(A, B)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::lti::{self, mix_seed, NoiseSchedule, SystemParams};
use crate::network::MixingMatrix;

/// Smallest singular value of `C_0` accepted by [`recover_system`].
pub const RECOVERY_RANK_TOL: f64 = 1e-8;

/// Independent `{-1, +1}^{d2}` probe streams, one per agent.
#[derive(Debug, Clone)]
pub struct Prober {
    rngs: Vec<ChaCha8Rng>,
    d2: usize,
}

impl Prober {
    pub fn new(seed: u64, m: usize, d2: usize) -> Self {
        let rngs = (0..m).map(|i| ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7072_6f62_6500 + i as u64))).collect();
        Prober { rngs, d2 }
    }

    pub fn draw(&mut self, agent: usize) -> Vector {
        let rng = &mut self.rngs[agent];
        Vector::from_fn(self.d2, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 })
    }
}

/// States and probes of the collection phase, `states[i][t-1] = x_{i,t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrace {
    pub m: usize,
    pub t_collect: usize,
    pub states: Vec<Vec<Vector>>,
    pub probes: Vec<Vec<Vector>>,
}

impl ProbeTrace {
    pub fn max_state_norm(&self) -> f64 {
        self.states.iter().flatten().map(|x| x.norm()).fold(0.0, f64::max)
    }
}

/// `2 kappa^3 max(W, 1) sqrt(d2) / gamma`, the state bound while probing.
pub fn exploration_state_bound(kappa: f64, gamma: f64, w: f64, d2: usize) -> f64 {
    2.0 * kappa.powi(3) * w.max(1.0) * (d2 as f64).sqrt() / gamma
}

/// Runs `u_{i,t} = -K x_{i,t} + xi_{i,t}` for `t_collect` rounds from zero,
/// with disturbance `noise(i, t)` hitting agent `i`.
pub fn explore_collect_with<F>(
    sys: &SystemParams,
    k: &Mat,
    t_collect: usize,
    m: usize,
    seed: u64,
    noise: F,
) -> Result<ProbeTrace>
where
    F: Fn(usize, usize) -> Vector,
{
    linalg::check_dims("K", k.shape(), (sys.d2(), sys.d1()))?;
    if m == 0 {
        return Err(Error::InvalidSize("need at least one agent".into()));
    }
    let mut prober = Prober::new(seed, m, sys.d2());
    let mut states = vec![Vec::with_capacity(t_collect); m];
    let mut probes = vec![Vec::with_capacity(t_collect); m];
    for i in 0..m {
        let mut x = Vector::zeros(sys.d1());
        for t in 1..=t_collect {
            let xi = prober.draw(i);
            let u = -(k * &x) + &xi;
            let next = lti::step(&x, &u, &noise(i, t), sys)?;
            states[i].push(x);
            probes[i].push(xi);
            x = next;
        }
    }
    Ok(ProbeTrace { m, t_collect, states, probes })
}

/// [`explore_collect_with`] under a disturbance shared by all agents.
pub fn explore_collect(
    sys: &SystemParams,
    k: &Mat,
    t_collect: usize,
    m: usize,
    noise: &NoiseSchedule,
    seed: u64,
) -> Result<ProbeTrace> {
    explore_collect_with(sys, k, t_collect, m, seed, |_, t| noise.noise_at(t as i64))
}

/// `N_0, ..., N_q` for one agent, each `d1 x d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentStack {
    #[serde(with = "linalg::rows_vec")]
    pub n: Vec<Mat>,
}

impl MomentStack {
    pub fn q(&self) -> usize {
        self.n.len() - 1
    }

    pub fn distance(&self, other: &MomentStack) -> f64 {
        self.n
            .iter()
            .zip(&other.n)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn frobenius(&self) -> f64 {
        self.n.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt()
    }

    /// `N_{k-1} = (A - BK)^{k-1} B`, the noise-free infinite-sample limit.
    pub fn exact(sys: &SystemParams, k: &Mat, q: usize) -> MomentStack {
        let a_cl = sys.closed_loop(k);
        let mut block = sys.b.clone();
        let mut n = Vec::with_capacity(q + 1);
        for _ in 0..=q {
            n.push(block.clone());
            block = &a_cl * block;
        }
        MomentStack { n }
    }
}

/// `N_{k-1} = 1/(T - (q+1)) sum_{t=1}^{T-(q+1)} x_{t+k} xi_t^T` for
/// `k = 1..=q+1`, from one agent's states and probes.
pub fn agent_moments(states: &[Vector], probes: &[Vector], q: usize) -> Result<MomentStack> {
    let t_collect = states.len().min(probes.len());
    if t_collect <= q + 1 {
        return Err(Error::InsufficientData(format!(
            "T_collect = {t_collect} must exceed q + 1 = {}",
            q + 1
        )));
    }
    let count = t_collect - (q + 1);
    let (d1, d2) = (states[0].len(), probes[0].len());
    let mut n = vec![Mat::zeros(d1, d2); q + 1];
    for t in 0..count {
        let xi = &probes[t];
        for (k, nk) in n.iter_mut().enumerate() {
            nk.ger(1.0, &states[t + k + 1], xi, 1.0);
        }
    }
    for nk in &mut n {
        *nk /= count as f64;
    }
    Ok(MomentStack { n })
}

pub fn moment_estimates(trace: &ProbeTrace, q: usize) -> Result<Vec<MomentStack>> {
    (0..trace.m).map(|i| agent_moments(&trace.states[i], &trace.probes[i], q)).collect()
}

/// One synchronous averaging round `N_i <- sum_j P_ji N_j`.
pub fn exchange_round(stacks: &[MomentStack], p: &MixingMatrix) -> Result<Vec<MomentStack>> {
    let m = p.m();
    if stacks.len() != m {
        return Err(Error::DimensionMismatch(format!("{} stacks for {m} agents", stacks.len())));
    }
    let shape: Vec<_> = stacks[0].n.iter().map(|a| a.shape()).collect();
    if stacks.iter().any(|s| s.n.iter().map(|a| a.shape()).ne(shape.iter().copied())) {
        return Err(Error::DimensionMismatch("moment stacks differ in shape".into()));
    }
    Ok((0..m)
        .map(|i| {
            let mut n: Vec<Mat> = shape.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
            for (j, s) in stacks.iter().enumerate() {
                let w = p.weight(j, i);
                if w != 0.0 {
                    for (acc, x) in n.iter_mut().zip(&s.n) {
                        *acc += x * w;
                    }
                }
            }
            MomentStack { n }
        })
        .collect())
}

pub fn consensus_exchange(stacks: &[MomentStack], p: &MixingMatrix, t_exchange: usize) -> Result<Vec<MomentStack>> {
    let mut cur = stacks.to_vec();
    if cur.len() != p.m() {
        return Err(Error::DimensionMismatch(format!("{} stacks for {} agents", cur.len(), p.m())));
    }
    for _ in 0..t_exchange {
        cur = exchange_round(&cur, p)?;
    }
    Ok(cur)
}

/// `max_i |N_i - mean|_F`.
pub fn stack_deviation(stacks: &[MomentStack]) -> f64 {
    let m = stacks.len() as f64;
    let mean = MomentStack {
        n: (0..stacks[0].n.len())
            .map(|k| stacks.iter().map(|s| &s.n[k]).fold(Mat::zeros(stacks[0].n[k].nrows(), stacks[0].n[k].ncols()), |a, b| a + b) / m)
            .collect(),
    };
    stacks.iter().map(|s| s.distance(&mean)).fold(0.0, f64::max)
}

/// `ceil(ln T / ln(1/beta))`, at least 1.
pub fn default_t_exchange(horizon: usize, beta: f64) -> usize {
    if beta <= 0.0 {
        return 1;
    }
    ((horizon.max(2) as f64).ln() / (1.0 / beta).ln()).ceil().max(1.0) as usize
}

/// `B_hat = N_0`, `A_hat' C_0 = C_1` in the least-squares sense with
/// `C_0 = [N_0 .. N_{q-1}]`, `C_1 = [N_1 .. N_q]`, and `A_hat = A_hat' + B_hat K`.
pub fn recover_system(stack: &MomentStack, k: &Mat, q: usize) -> Result<(Mat, Mat)> {
    if q == 0 || stack.n.len() < q + 1 {
        return Err(Error::InsufficientData(format!("need q >= 1 and q + 1 moments, got q={q}, {}", stack.n.len())));
    }
    let (d1, d2) = stack.n[0].shape();
    linalg::check_dims("K", k.shape(), (d2, d1))?;
    let mut c0 = Mat::zeros(d1, q * d2);
    let mut c1 = Mat::zeros(d1, q * d2);
    for j in 0..q {
        c0.columns_mut(j * d2, d2).copy_from(&stack.n[j]);
        c1.columns_mut(j * d2, d2).copy_from(&stack.n[j + 1]);
    }
    let s = linalg::singular_values(&c0)?;
    let sigma_min = if s.len() < d1 { 0.0 } else { s[d1 - 1] };
    if sigma_min < RECOVERY_RANK_TOL {
        return Err(Error::RankDeficient { sigma_min });
    }
    let a_prime = linalg::solve_right(&c0, &c1)?;
    let b_hat = stack.n[0].clone();
    let a_hat = a_prime + &b_hat * k;
    Ok((a_hat, b_hat))
}

/// Per-agent estimates with error diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysIdReport {
    pub m: usize,
    pub t_collect: usize,
    pub t_exchange: usize,
    pub q: usize,
    #[serde(with = "linalg::rows_vec")]
    pub a_hat: Vec<Mat>,
    #[serde(with = "linalg::rows_vec")]
    pub b_hat: Vec<Mat>,
    /// `max(|A_hat_i - A|, |B_hat_i - B|)` per agent, when the truth is known.
    pub eps: Option<Vec<f64>>,
    /// Largest pairwise distance between agents' estimates.
    pub eps_cross: f64,
    /// Noise-error amplification `24 W sqrt(d2) kappa^7 / gamma^2`.
    pub zeta: f64,
    /// `gamma^2 / (12 kappa^7)`: largest estimate error for which `zeta`
    /// bounds the noise-estimate error.
    pub eps_limit: f64,
    pub delta: f64,
    /// Rate template `(d2 W sqrt(d1 q) kappa^{11/2} / gamma)
    /// sqrt(log(d1 d2 (q+1) m / delta) / (m (T_collect - q - 1)))`.
    pub rate_bound: f64,
}

impl SysIdReport {
    pub fn eps_max(&self) -> Option<f64> {
        self.eps.as_ref().map(|e| e.iter().copied().fold(0.0, f64::max))
    }

    pub fn eps_mean(&self) -> Option<f64> {
        self.eps.as_ref().map(|e| e.iter().sum::<f64>() / e.len() as f64)
    }
}

/// Scalars needed to fill a [`SysIdReport`].
#[derive(Debug, Clone, Copy)]
pub struct ReportConstants {
    pub kappa: f64,
    pub gamma: f64,
    pub w: f64,
    pub delta: f64,
}

pub fn zeta(kappa: f64, gamma: f64, w: f64, d2: usize) -> f64 {
    24.0 * w * (d2 as f64).sqrt() * kappa.powi(7) / (gamma * gamma)
}

pub fn build_report(
    estimates: Vec<(Mat, Mat)>,
    truth: Option<&SystemParams>,
    t_collect: usize,
    t_exchange: usize,
    q: usize,
    c: ReportConstants,
) -> SysIdReport {
    let m = estimates.len();
    let (a_hat, b_hat): (Vec<Mat>, Vec<Mat>) = estimates.into_iter().unzip();
    let eps = truth.map(|sys| {
        a_hat
            .iter()
            .zip(&b_hat)
            .map(|(a, b)| linalg::spectral_norm(&(a - &sys.a)).max(linalg::spectral_norm(&(b - &sys.b))))
            .collect()
    });
    let mut eps_cross: f64 = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let da = linalg::spectral_norm(&(&a_hat[i] - &a_hat[j]));
            let db = linalg::spectral_norm(&(&b_hat[i] - &b_hat[j]));
            eps_cross = eps_cross.max(da.max(db));
        }
    }
    let (d1, d2) = a_hat.first().map(|a| (a.nrows(), b_hat[0].ncols())).unwrap_or((0, 0));
    let samples = (t_collect.saturating_sub(q + 1)).max(1) as f64;
    let log_term = ((d1 * d2 * (q + 1) * m.max(1)) as f64 / c.delta).ln().max(0.0);
    let rate_bound = d2 as f64 * c.w * ((d1 * q) as f64).sqrt() * c.kappa.powf(5.5) / c.gamma
        * (log_term / (m.max(1) as f64 * samples)).sqrt();
    SysIdReport {
        m,
        t_collect,
        t_exchange,
        q,
        a_hat,
        b_hat,
        eps,
        eps_cross,
        zeta: zeta(c.kappa, c.gamma, c.w, d2),
        eps_limit: c.gamma * c.gamma / (12.0 * c.kappa.powi(7)),
        delta: c.delta,
        rate_bound,
    }
}

/// Collection, moments, exchange and recovery end to end (the estimation
/// part of the unknown-dynamics algorithm without its control phase).
#[allow(clippy::too_many_arguments)]
pub fn identify(
    sys: &SystemParams,
    k: &Mat,
    mixing: &MixingMatrix,
    noise: &NoiseSchedule,
    t_collect: usize,
    t_exchange: usize,
    q: usize,
    seed: u64,
    c: ReportConstants,
) -> Result<SysIdReport> {
    let trace = explore_collect(sys, k, t_collect, mixing.m(), noise, seed)?;
    let stacks = moment_estimates(&trace, q)?;
    let stacks = consensus_exchange(&stacks, mixing, t_exchange)?;
    let estimates = stacks.iter().map(|s| recover_system(s, k, q)).collect::<Result<Vec<_>>>()?;
    Ok(build_report(estimates, Some(sys), t_collect, t_exchange, q, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::NoiseKind;
    use crate::network::{build_topology, metropolis_weights, TopologyKind};

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn scalar_noise_free_hand_recursion() {
        let (a, b, k) = (0.9, 2.0, 0.3);
        let sys = SystemParams::new(scalar(a), scalar(b)).unwrap();
        let quiet = NoiseSchedule::new(NoiseKind::Constant, 0.0, 0, 1);
        let tr = explore_collect(&sys, &scalar(k), 4, 1, &quiet, 11).unwrap();
        let mut x = 0.0;
        for t in 0..4 {
            assert!((tr.states[0][t][0] - x).abs() < 1e-15);
            let xi = tr.probes[0][t][0];
            assert!(xi == 1.0 || xi == -1.0);
            x = (a - b * k) * x + b * xi;
        }
    }

    #[test]
    fn probes_reproducible_and_independent_across_agents() {
        let mut p1 = Prober::new(5, 3, 4);
        let mut p2 = Prober::new(5, 3, 4);
        let a: Vec<_> = (0..50).map(|_| p1.draw(0)).collect();
        let b: Vec<_> = (0..50).map(|_| p2.draw(0)).collect();
        assert_eq!(a, b);
        let c: Vec<_> = (0..50).map(|_| p1.draw(1)).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn exploration_states_bounded() {
        let sys = SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2)).unwrap();
        let k = Mat::zeros(2, 2);
        let cert = crate::stability::certify_strong_stability(&k, &sys).unwrap();
        let noise = NoiseSchedule::new(NoiseKind::UniformBounded, 1.0, 4, 2);
        let tr = explore_collect(&sys, &k, 3000, 3, &noise, 1).unwrap();
        let kappa = crate::known::effective_kappa(&cert, &sys);
        assert!(tr.max_state_norm() <= exploration_state_bound(kappa, cert.gamma, 1.0, 2));
    }

    #[test]
    fn zero_probes_give_zero_moments() {
        let states = vec![Vector::from_element(2, 1.0); 10];
        let probes = vec![Vector::zeros(1); 10];
        let s = agent_moments(&states, &probes, 2).unwrap();
        assert!(s.n.iter().all(|n| n.norm() == 0.0));
        assert!(matches!(agent_moments(&states[..3], &probes[..3], 2), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn exact_moments_recover_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Mat::from_fn(3, 3, |_, _| rng.gen_range(-0.6..0.6));
            let b = Mat::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
            let k = Mat::from_fn(2, 3, |_, _| rng.gen_range(-0.2..0.2));
            let sys = SystemParams::new(a.clone(), b.clone()).unwrap();
            let q = crate::stability::controllability_index(&a, &b).unwrap();
            let (ah, bh) = recover_system(&MomentStack::exact(&sys, &k, q), &k, q).unwrap();
            assert!((ah - a).norm() < 1e-10 && (bh - b).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_input_matrix_is_rank_deficient() {
        let sys = SystemParams::new(Mat::identity(2, 2) * 0.5, Mat::zeros(2, 1)).unwrap();
        let k = Mat::zeros(1, 2);
        assert!(matches!(
            recover_system(&MomentStack::exact(&sys, &k, 2), &k, 2),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn exchange_trivial_cases_and_ring_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stacks: Vec<MomentStack> = (0..5)
            .map(|_| MomentStack { n: (0..3).map(|_| Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0))).collect() })
            .collect();
        let g = build_topology(TopologyKind::Ring, 5, 0).unwrap();
        let p = metropolis_weights(&g).unwrap();
        assert_eq!(consensus_exchange(&stacks, &p, 0).unwrap(), stacks);
        let uni = MixingMatrix::from_matrix(Mat::from_element(5, 5, 0.2)).unwrap();
        assert!(stack_deviation(&consensus_exchange(&stacks, &uni, 1).unwrap()) < 1e-15);
        let scale = stacks.iter().map(|s| s.frobenius()).fold(0.0, f64::max) * 5f64.sqrt();
        let mut cur = stacks.clone();
        for tau in 1..=30 {
            cur = exchange_round(&cur, &p).unwrap();
            assert!(stack_deviation(&cur) <= scale * p.beta.powi(tau) + 1e-12);
        }
    }

    #[test]
    fn noise_free_moments_converge() {
        let sys = SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2)).unwrap();
        let k = Mat::zeros(2, 2);
        let quiet = NoiseSchedule::new(NoiseKind::Constant, 0.0, 0, 2);
        let exact = MomentStack::exact(&sys, &k, 1);
        let errs: Vec<f64> = [1000, 4000, 16000]
            .iter()
            .map(|&t| {
                let tr = explore_collect(&sys, &k, t, 1, &quiet, 21).unwrap();
                let s = agent_moments(&tr.states[0], &tr.probes[0], 1).unwrap();
                s.distance(&exact)
            })
            .collect();
        assert!(errs[2] < errs[0]);
        assert!(errs[2] < 0.05);
    }

    #[test]
    fn report_spread_within_twice_error() {
        let sys = SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2)).unwrap();
        let g = build_topology(TopologyKind::Ring, 4, 0).unwrap();
        let p = metropolis_weights(&g).unwrap();
        let noise = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 2, 2);
        let c = ReportConstants { kappa: 1.0, gamma: 0.45, w: 1.0, delta: 0.05 };
        let rep = identify(&sys, &Mat::zeros(2, 2), &p, &noise, 2000, 3, 1, 7, c).unwrap();
        assert!(rep.eps_cross <= 2.0 * rep.eps_max().unwrap() + 1e-15);
        assert!(rep.eps_max().unwrap() < 0.2);
    }

    #[test]
    fn default_exchange_rounds() {
        assert_eq!(default_t_exchange(1000, 0.0), 1);
        let t = default_t_exchange(1000, 0.5);
        assert_eq!(t, (1000f64.ln() / 2f64.ln()).ceil() as usize);
    }
}
