//! Hindsight comparators and regret bookkeeping: best certified linear policy
//! on a grid, the offline-optimal time-invariant DFC, per-agent regret and
//! log-log slope fits over horizon sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfc::{self, ClosedLoop, DfcParams, DfcSet, SurrogateAffine};
use crate::error::{Error, Result};
use crate::known::ExperimentTrace;
use crate::linalg::{self, Mat, Vector};
use crate::lti::{self, StageCost, SystemParams};
use crate::stability::{self, StabilityCertificate};

/// Certified candidate gains for the linear-policy comparator.
#[derive(Debug, Clone)]
pub struct PolicyGrid {
    pub candidates: Vec<Mat>,
    pub certs: Vec<StabilityCertificate>,
}

impl PolicyGrid {
    /// Certifies every candidate; fails on the first uncertifiable one.
    pub fn from_candidates(sys: &SystemParams, candidates: Vec<Mat>) -> Result<Self> {
        let certs = candidates
            .iter()
            .map(|k| stability::certify_strong_stability(k, sys))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyGrid { candidates, certs })
    }

    /// Axis-aligned grid `center + offsets`, each entry offset over
    /// `points` evenly spaced values in `[-radius, radius]`, keeping only
    /// certified candidates. Suited to `d1 * d2 <= 4`.
    pub fn axis(sys: &SystemParams, center: &Mat, radius: f64, points: usize) -> Result<Self> {
        let n = center.len();
        let points = points.max(1);
        let offsets: Vec<f64> = if points == 1 {
            vec![0.0]
        } else {
            (0..points).map(|i| -radius + 2.0 * radius * i as f64 / (points - 1) as f64).collect()
        };
        let total = points.checked_pow(n as u32).ok_or_else(|| Error::InvalidSize("grid too large".into()))?;
        let mut candidates = Vec::new();
        let mut certs = Vec::new();
        for idx in 0..total {
            let mut rem = idx;
            let mut k = center.clone();
            for e in 0..n {
                k[e] += offsets[rem % points];
                rem /= points;
            }
            if let Ok(c) = stability::certify_strong_stability(&k, sys) {
                candidates.push(k);
                certs.push(c);
            }
        }
        if candidates.is_empty() {
            return Err(Error::EmptyGrid);
        }
        Ok(PolicyGrid { candidates, certs })
    }

    /// `count` seeded uniform perturbations of `center` in a box of half
    /// width `radius`, filtered by certification; `center` comes first.
    pub fn random(sys: &SystemParams, center: &Mat, radius: f64, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut candidates = vec![center.clone()];
        for _ in 0..count {
            candidates.push(center + Mat::from_fn(center.nrows(), center.ncols(), |_, _| rng.gen_range(-radius..=radius)));
        }
        let mut kept = Vec::new();
        let mut certs = Vec::new();
        for k in candidates {
            if let Ok(c) = stability::certify_strong_stability(&k, sys) {
                kept.push(k);
                certs.push(c);
            }
        }
        if kept.is_empty() {
            return Err(Error::EmptyGrid);
        }
        Ok(PolicyGrid { candidates: kept, certs })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Network cost `sum_t sum_i c_{i,t}` of `u = -K x` from `x_1 = 0` with
/// `noise[t-1] = w_t`.
pub fn linear_policy_cost<C: StageCost + ?Sized>(
    k: &Mat,
    sys: &SystemParams,
    noise: &[Vector],
    costs: &C,
    horizon: usize,
) -> Result<f64> {
    let traj = lti::rollout_linear_policy(k, sys, noise, horizon)?;
    Ok(traj.iter().enumerate().map(|(i, p)| costs.network(i + 1, &p.x, &p.u)).sum())
}

/// Comparator chosen from a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridChoice {
    pub index: usize,
    #[serde(with = "linalg::rows")]
    pub k_star: Mat,
    pub j_star: f64,
    /// Cost of every candidate, in grid order.
    pub costs: Vec<f64>,
}

/// Argmin over the grid of the network cost; ties go to the earliest candidate.
pub fn best_linear_in_hindsight<C: StageCost + ?Sized>(
    noise: &[Vector],
    costs: &C,
    grid: &PolicyGrid,
    sys: &SystemParams,
    horizon: usize,
) -> Result<GridChoice> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let all = grid
        .candidates
        .iter()
        .map(|k| linear_policy_cost(k, sys, noise, costs, horizon))
        .collect::<Result<Vec<_>>>()?;
    let mut index = 0;
    for (i, &j) in all.iter().enumerate() {
        if j < all[index] {
            index = i;
        }
    }
    Ok(GridChoice { index, k_star: grid.candidates[index].clone(), j_star: all[index], costs: all })
}

/// `J_T^j - J*`, with `J_T^j` the network cost accumulated along agent `j`'s
/// trajectory. Negative values are returned as is.
pub fn individual_regret(trace: &ExperimentTrace, agent: usize, j_star: f64) -> Result<f64> {
    if agent >= trace.m {
        return Err(Error::IndexOutOfRange(format!("agent {agent} of {}", trace.m)));
    }
    let mut seen = 0usize;
    let mut total = 0.0;
    for (expected_t, row) in (1..).zip(trace.agent_rows(agent)) {
        if row.t != expected_t {
            return Err(Error::IncompleteTrace(format!("agent {agent}: round {expected_t} missing")));
        }
        total += row.cost;
        seen += 1;
    }
    if seen != trace.horizon {
        return Err(Error::IncompleteTrace(format!("agent {agent}: {seen} of {} rounds", trace.horizon)));
    }
    Ok(total - j_star)
}

/// Recomputes agent `j`'s accumulated cost from the logged `(x, u)` pairs.
pub fn recompute_agent_cost<C: StageCost + ?Sized>(trace: &ExperimentTrace, costs: &C, agent: usize) -> f64 {
    trace.agent_rows(agent).map(|r| costs.network(r.t, &r.x, &r.u)).sum()
}

/// Mean of the individual regrets over all agents.
pub fn mean_regret(trace: &ExperimentTrace, j_star: f64) -> Result<f64> {
    let mut acc = 0.0;
    for j in 0..trace.m {
        acc += individual_regret(trace, j, j_star)?;
    }
    Ok(acc / trace.m as f64)
}

/// `F(m) = m^T A m + 2 b^T m + c`, the summed surrogate network cost of a
/// time-invariant DFC in vectorized form.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub a: Mat,
    pub b: Vector,
    pub c: f64,
    pub h: usize,
    pub d1: usize,
    pub d2: usize,
}

impl QuadraticObjective {
    /// Assembles `sum_{t=1}^{T} sum_i f_{i,t}(M, ..., M)` for quadratic costs,
    /// with `noise[t-1] = w_t` and `w_t = 0` for `t <= 0`.
    pub fn assemble<C: StageCost + ?Sized>(
        noise: &[Vector],
        costs: &C,
        sys: &SystemParams,
        k: &Mat,
        h: usize,
        horizon: usize,
    ) -> Result<Self> {
        if noise.len() < horizon {
            return Err(Error::DimensionMismatch(format!("noise has {} rounds, need {horizon}", noise.len())));
        }
        let (d1, d2) = (sys.d1(), sys.d2());
        let n = h * d1 * d2;
        let cl = ClosedLoop::new(sys, k, h)?;
        let mut a = Mat::zeros(n, n);
        let mut b = Vector::zeros(n);
        let mut c = 0.0;
        let zero = Vector::zeros(d1);
        let mut window: Vec<Vector> = vec![zero.clone(); 2 * h + 1];
        for t in 1..=horizon {
            window.rotate_right(1);
            window[0] = noise[t - 1].clone();
            let mut q_sum = Mat::zeros(d1, d1);
            let mut r_sum = Mat::zeros(d2, d2);
            let mut qg = Vector::zeros(d1);
            let mut gqg = 0.0;
            for i in 0..costs.agents() {
                let st = costs.quadratic(i, t).ok_or_else(|| {
                    Error::UnsupportedCost("offline comparator needs quadratic stage costs".into())
                })?;
                let sq = &st.q * &st.target;
                gqg += st.target.dot(&sq);
                qg += sq;
                q_sum += &st.q;
                r_sum += &st.r;
            }
            let aff = SurrogateAffine::new(&cl, h, &window)?;
            let qj = &q_sum * &aff.jy;
            let rj = &r_sum * &aff.jv;
            a.gemm_tr(1.0, &aff.jy, &qj, 1.0);
            a.gemm_tr(1.0, &aff.jv, &rj, 1.0);
            let ly = &q_sum * &aff.y0 - &qg;
            let lv = &r_sum * &aff.v0;
            b.gemv_tr(1.0, &aff.jy, &ly, 1.0);
            b.gemv_tr(1.0, &aff.jv, &lv, 1.0);
            c += aff.y0.dot(&(&q_sum * &aff.y0)) - 2.0 * aff.y0.dot(&qg) + gqg + aff.v0.dot(&lv);
        }
        // symmetrize against rounding
        let a = (&a + a.transpose()) * 0.5;
        Ok(QuadraticObjective { a, b, c, h, d1, d2 })
    }

    pub fn value(&self, m: &Vector) -> f64 {
        m.dot(&(&self.a * m)) + 2.0 * self.b.dot(m) + self.c
    }

    pub fn gradient(&self, m: &Vector) -> Vector {
        (&self.a * m + &self.b) * 2.0
    }

    pub fn params(&self, m: &Vector) -> DfcParams {
        DfcParams::from_vec(m, self.h, self.d2, self.d1)
    }
}

/// Offline-optimal DFC and solver diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineSolution {
    pub params: DfcParams,
    /// Summed surrogate network cost at `params`.
    pub objective: f64,
    /// Norm of the projected-gradient mapping at `params`.
    pub pg_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Relative stopping tolerance for the projected-gradient mapping.
pub const OFFLINE_TOL: f64 = 1e-6;
pub const OFFLINE_MAX_ITER: usize = 10_000;

fn project_vec(obj: &QuadraticObjective, set: &DfcSet, m: &Vector) -> Result<Vector> {
    Ok(dfc::project_to_set(&obj.params(m), set)?.to_vec())
}

/// Minimizes a [`QuadraticObjective`] over the constraint set: the
/// unconstrained minimizer when it is feasible, otherwise accelerated
/// projected gradient from its projection. Non-convergence is reported in
/// the result, which then holds the best iterate.
pub fn minimize_over_set(obj: &QuadraticObjective, set: &DfcSet) -> Result<OfflineSolution> {
    let n = obj.b.len();
    let scale = 1.0 + 2.0 * obj.b.norm();
    let eig = obj.a.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let lipschitz = 2.0 * lambda_max;
    let pg_norm_at = |m: &Vector| -> Result<f64> {
        if lipschitz <= 0.0 {
            return Ok(obj.gradient(m).norm());
        }
        let stepped = m - obj.gradient(m) / lipschitz;
        Ok((m - project_vec(obj, set, &stepped)?).norm() * lipschitz)
    };
    let finish = |m: Vector, iterations: usize| -> Result<OfflineSolution> {
        let pg = pg_norm_at(&m)?;
        Ok(OfflineSolution {
            objective: obj.value(&m),
            params: obj.params(&m),
            pg_norm: pg,
            iterations,
            converged: pg <= OFFLINE_TOL * scale,
        })
    };
    if lipschitz <= 0.0 || obj.b.norm() == 0.0 && lambda_max <= 0.0 {
        return finish(Vector::zeros(n), 0);
    }
    let start = match obj.a.clone().cholesky() {
        Some(ch) => {
            let m = -ch.solve(&obj.b);
            let params = obj.params(&m);
            if set.contains(&params, 0.0) {
                return finish(m, 0);
            }
            project_vec(obj, set, &m)?
        }
        None => Vector::zeros(n),
    };
    let mut x = start.clone();
    let mut y = start;
    let mut tk: f64 = 1.0;
    let mut best = x.clone();
    let mut best_val = obj.value(&x);
    for it in 1..=OFFLINE_MAX_ITER {
        let x_next = project_vec(obj, set, &(&y - obj.gradient(&y) / lipschitz))?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let val = obj.value(&x_next);
        // restart momentum when the objective goes up
        if val > best_val {
            y = x.clone();
            tk = 1.0;
        } else {
            y = &x_next + (&x_next - &x) * ((tk - 1.0) / t_next);
            tk = t_next;
        }
        if val <= best_val {
            best_val = val;
            best = x_next.clone();
        }
        x = x_next;
        if it % 10 == 0 && pg_norm_at(&best)? <= OFFLINE_TOL * scale {
            return finish(best, it);
        }
    }
    log::warn!("offline comparator stopped after {OFFLINE_MAX_ITER} iterations without converging");
    finish(best, OFFLINE_MAX_ITER)
}

/// `argmin_{M in set} sum_t sum_i f_{i,t}(M, ..., M)`.
pub fn offline_optimal_dfc<C: StageCost + ?Sized>(
    noise: &[Vector],
    costs: &C,
    set: &DfcSet,
    sys: &SystemParams,
    k: &Mat,
    horizon: usize,
) -> Result<OfflineSolution> {
    let obj = QuadraticObjective::assemble(noise, costs, sys, k, set.h, horizon)?;
    minimize_over_set(&obj, set)
}

/// Network cost of the time-invariant DFC `(M, K)` rolled out from
/// `x_1 = 0` with exact disturbances `noise[t-1] = w_t`.
pub fn dfc_rollout_cost<C: StageCost + ?Sized>(
    m: &DfcParams,
    k: &Mat,
    sys: &SystemParams,
    noise: &[Vector],
    costs: &C,
    horizon: usize,
) -> Result<f64> {
    if noise.len() < horizon {
        return Err(Error::DimensionMismatch(format!("noise has {} rounds, need {horizon}", noise.len())));
    }
    let d1 = sys.d1();
    let mut x = Vector::zeros(d1);
    let mut past: Vec<Vector> = vec![Vector::zeros(d1); m.h];
    let mut total = 0.0;
    for t in 1..=horizon {
        let u = dfc::dfc_action(k, &x, m, &past)?;
        total += costs.network(t, &x, &u);
        x = lti::step(&x, &u, &noise[t - 1], sys)?;
        if m.h > 0 {
            past.rotate_right(1);
            past[0] = noise[t - 1].clone();
        }
    }
    Ok(total)
}

/// Least-squares line through `(ln T, ln regret)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Fits `ln regret = slope ln T + intercept`; needs at least 3 points with
/// positive regret.
pub fn regret_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!("slope fit needs 3 points, got {}", points.len())));
    }
    if let Some(&(t, r)) = points.iter().find(|p| !(p.1 > 0.0)) {
        return Err(Error::NonPositiveRegret { t: t as usize, regret: r });
    }
    Ok(log_log_fit(points))
}

/// As [`regret_slope`] but replaces regrets below `floor` by `floor`, with a
/// warning, instead of failing.
pub fn regret_slope_floored(points: &[(f64, f64)], floor: f64) -> Result<SlopeFit> {
    let floored: Vec<(f64, f64)> = points
        .iter()
        .map(|&(t, r)| {
            if r < floor {
                log::warn!("regret {r} at T={t} floored to {floor} for the slope fit");
                (t, floor)
            } else {
                (t, r)
            }
        })
        .collect();
    regret_slope(&floored)
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn log_log_fit(points: &[(f64, f64)]) -> SlopeFit {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    SlopeFit { slope, intercept, r2 }
}
