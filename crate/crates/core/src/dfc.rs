//! Disturbance-feedback controllers (DFC): actions linear in past
//! disturbances, the disturbance-state transfer matrix, truncated-memory
//! surrogate state/action/cost, their gradients, and the constraint set.
//!
//! Conventions:
//! * a policy window is a slice ordered newest first, `window[j] = M_{t-j}`;
//! * a disturbance slice is ordered newest first. For [`dfc_action`] at round
//!   `t` it holds `w_{t-1}, w_{t-2}, ...`; for the surrogate functions
//!   evaluated after round `t` it holds `w_t, w_{t-1}, ...`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_dims, check_len, Mat, PowerCache, Vector};
use crate::lti::{StageCost, SystemParams};

/// Coefficients `M = {M^[0], ..., M^[H-1]}`, each `d2 x d1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfcParams {
    pub h: usize,
    pub d1: usize,
    pub d2: usize,
    #[serde(with = "linalg::rows_vec")]
    pub blocks: Vec<Mat>,
}

impl DfcParams {
    pub fn zeros(h: usize, d2: usize, d1: usize) -> Self {
        DfcParams { h, d1, d2, blocks: vec![Mat::zeros(d2, d1); h] }
    }

    pub fn from_blocks(blocks: Vec<Mat>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidSize("a DFC needs at least one block".into()))?;
        let (d2, d1) = first.shape();
        for (i, b) in blocks.iter().enumerate() {
            check_dims(&format!("block {i}"), b.shape(), (d2, d1))?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure(format!("block {i} has non-finite entries")));
            }
        }
        Ok(DfcParams { h: blocks.len(), d1, d2, blocks })
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.h * self.d1 * self.d2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Blocks stacked in order, each column-major.
    pub fn to_vec(&self) -> Vector {
        let mut v = Vector::zeros(self.len());
        let per = self.d1 * self.d2;
        for (r, b) in self.blocks.iter().enumerate() {
            v.rows_mut(r * per, per).copy_from_slice(b.as_slice());
        }
        v
    }

    pub fn from_vec(v: &Vector, h: usize, d2: usize, d1: usize) -> Self {
        let per = d1 * d2;
        let blocks = (0..h)
            .map(|r| Mat::from_column_slice(d2, d1, &v.as_slice()[r * per..(r + 1) * per]))
            .collect();
        DfcParams { h, d1, d2, blocks }
    }

    pub fn same_shape(&self, other: &DfcParams) -> bool {
        self.h == other.h && self.d1 == other.d1 && self.d2 == other.d2
    }

    pub fn frobenius(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &DfcParams) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DfcParams) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            *a += b * alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> DfcParams {
        DfcParams { blocks: self.blocks.iter().map(|b| b * alpha).collect(), ..*self }
    }

    pub fn lerp(&self, other: &DfcParams, lambda: f64) -> DfcParams {
        let mut out = self.scaled(lambda);
        out.axpy(1.0 - lambda, other);
        out
    }
}

/// `M = {M : |M^[i]| <= C (1 - gamma)^i}` (spectral norm per block).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DfcSet {
    pub c: f64,
    pub gamma: f64,
    pub h: usize,
}

impl DfcSet {
    pub fn new(c: f64, gamma: f64, h: usize) -> Result<Self> {
        if !(c > 0.0) || !(gamma > 0.0 && gamma <= 1.0) || h == 0 {
            return Err(Error::InvalidSize(format!("invalid DFC set C={c}, gamma={gamma}, H={h}")));
        }
        Ok(DfcSet { c, gamma, h })
    }

    /// The default radius scale `C = 2 kappa^3`.
    pub fn standard(kappa: f64, gamma: f64, h: usize) -> Result<Self> {
        Self::new(2.0 * kappa.powi(3), gamma, h)
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.c * (1.0 - self.gamma).powi(i as i32)
    }

    /// Membership up to a relative tolerance.
    pub fn contains(&self, m: &DfcParams, tol: f64) -> bool {
        m.h == self.h
            && m.blocks
                .iter()
                .enumerate()
                .all(|(i, b)| linalg::spectral_norm(b) <= self.radius(i) * (1.0 + tol) + tol)
    }

    /// `sum_i C (1-gamma)^i`, a bound on `sum_i |M^[i]|` over the set.
    pub fn total_radius(&self) -> f64 {
        (0..self.h).map(|i| self.radius(i)).sum()
    }
}

/// Per-block Frobenius projection onto the constraint set; blocks already
/// inside are returned bit-for-bit.
pub fn project_to_set(m: &DfcParams, set: &DfcSet) -> Result<DfcParams> {
    if m.h != set.h {
        return Err(Error::DimensionMismatch(format!("DFC has H={}, set has H={}", m.h, set.h)));
    }
    let blocks = m
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| linalg::clip_spectral(b, set.radius(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DfcParams { blocks, ..*m })
}

/// Closed-loop data for one `(A, B, K)`: cached powers of `A - BK` and the
/// products `(A - BK)^j B`. Read-only after construction.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub sys: SystemParams,
    pub k: Mat,
    powers: PowerCache,
    powers_b: Vec<Mat>,
}

impl ClosedLoop {
    pub fn new(sys: &SystemParams, k: &Mat, max_power: usize) -> Result<Self> {
        check_dims("K", k.shape(), (sys.d2(), sys.d1()))?;
        let a_cl = sys.closed_loop(k);
        let powers = PowerCache::new(&a_cl, max_power);
        let powers_b = (0..=max_power).map(|j| powers.get(j) * &sys.b).collect();
        Ok(ClosedLoop { sys: sys.clone(), k: k.clone(), powers, powers_b })
    }

    pub fn d1(&self) -> usize {
        self.sys.d1()
    }

    pub fn d2(&self) -> usize {
        self.sys.d2()
    }

    pub fn max_power(&self) -> usize {
        self.powers.max_exponent()
    }

    /// `(A - BK)^j`.
    pub fn power(&self, j: usize) -> &Mat {
        self.powers.get(j)
    }

    /// `(A - BK)^j B`.
    pub fn power_b(&self, j: usize) -> &Mat {
        &self.powers_b[j]
    }
}

/// `u = -K x + sum_{k=1}^{H} M^[k-1] w_{t-k}` with `past[k-1] = w_{t-k}`.
pub fn dfc_action(k: &Mat, x: &Vector, m: &DfcParams, past: &[Vector]) -> Result<Vector> {
    check_dims("K", k.shape(), (m.d2, m.d1))?;
    check_len("state", x.len(), m.d1)?;
    if past.len() < m.h {
        return Err(Error::DimensionMismatch(format!(
            "need {} past disturbances, got {}",
            m.h,
            past.len()
        )));
    }
    let mut u = -(k * x);
    for (block, w) in m.blocks.iter().zip(past) {
        check_len("disturbance", w.len(), m.d1)?;
        u += block * w;
    }
    Ok(u)
}

/// Disturbance-state transfer matrix `Psi^{K,h}_{t,i}` for the window
/// `window[j] = M_{t-j}`, `j = 0..=h`.
pub fn transfer_matrix(cl: &ClosedLoop, h: usize, i: usize, window: &[DfcParams]) -> Result<Mat> {
    if window.len() != h + 1 {
        return Err(Error::IndexOutOfRange(format!("window holds {} policies, need h+1={}", window.len(), h + 1)));
    }
    let big_h = window[0].h;
    if i > big_h + h {
        return Err(Error::IndexOutOfRange(format!("i={i} exceeds H+h={}", big_h + h)));
    }
    let top = h.min(i);
    if top > cl.max_power() {
        return Err(Error::IndexOutOfRange(format!("power {top} beyond cache {}", cl.max_power())));
    }
    let d1 = cl.d1();
    let mut psi = if i <= h { cl.power(i).clone() } else { Mat::zeros(d1, d1) };
    for (j, m) in window.iter().enumerate().take(h + 1) {
        // indicator i - j in [1, H]
        if j >= i || i - j > big_h {
            continue;
        }
        psi += cl.power_b(j) * &m.blocks[i - j - 1];
    }
    Ok(psi)
}

fn check_surrogate_inputs(cl: &ClosedLoop, h: usize, noise: &[Vector]) -> Result<()> {
    if noise.len() < 2 * h + 1 {
        return Err(Error::DimensionMismatch(format!(
            "surrogate needs {} disturbances, got {}",
            2 * h + 1,
            noise.len()
        )));
    }
    if cl.max_power() < h {
        return Err(Error::IndexOutOfRange(format!("closed-loop cache holds {} powers, need {h}", cl.max_power())));
    }
    Ok(())
}

/// Surrogate state `y_{t+1} = sum_{i=0}^{2H} Psi^{K,H}_{t,i} w_{t-i}` for the
/// window `window[j] = M_{t-j}` (length `H+1`) and `noise[i] = w_{t-i}`.
pub fn surrogate_state(cl: &ClosedLoop, window: &[DfcParams], noise: &[Vector]) -> Result<Vector> {
    let h = window
        .first()
        .ok_or_else(|| Error::DimensionMismatch("empty policy window".into()))?
        .h;
    if window.len() != h + 1 {
        return Err(Error::DimensionMismatch(format!("window holds {} policies, need H+1={}", window.len(), h + 1)));
    }
    check_surrogate_inputs(cl, h, noise)?;
    let mut y = Vector::zeros(cl.d1());
    for (i, w) in noise.iter().enumerate().take(h + 1) {
        y += cl.power(i) * w;
    }
    for (j, m) in window.iter().enumerate() {
        let mut inner = Vector::zeros(cl.d2());
        for (r, block) in m.blocks.iter().enumerate() {
            inner += block * &noise[j + r + 1];
        }
        y += cl.power_b(j) * inner;
    }
    Ok(y)
}

/// Surrogate action `v_{t+1} = -K y_{t+1} + sum_{i=1}^{H} M_{t+1}^[i-1] w_{t+1-i}`.
pub fn surrogate_action(y: &Vector, k: &Mat, m_next: &DfcParams, noise: &[Vector]) -> Result<Vector> {
    dfc_action(k, y, m_next, noise)
}

/// `f_{i,t} = c_{i,t}(y_{t+1}, v_{t+1})`.
pub fn surrogate_cost<C: StageCost + ?Sized>(
    cost: &C,
    agent: usize,
    t: usize,
    cl: &ClosedLoop,
    window: &[DfcParams],
    m_next: &DfcParams,
    noise: &[Vector],
) -> Result<f64> {
    let y = surrogate_state(cl, window, noise)?;
    let v = surrogate_action(&y, &cl.k, m_next, noise)?;
    Ok(cost.eval(agent, t, &y, &v))
}

/// Surrogate pair for a time-invariant policy.
pub fn surrogate_pair_invariant(cl: &ClosedLoop, m: &DfcParams, noise: &[Vector]) -> Result<(Vector, Vector)> {
    check_surrogate_inputs(cl, m.h, noise)?;
    let (d1, h) = (cl.d1(), m.h);
    let nw = window_matrix(noise, 2 * h + 1, d1)?;
    let mcat = hcat(&m.blocks, m.d2, d1);
    let mut y = Vector::zeros(d1);
    for (i, w) in noise.iter().enumerate().take(h + 1) {
        y.gemv(1.0, cl.power(i), w, 1.0);
    }
    // With every slot equal, sum_j (A-BK)^j B sum_r M^[r] w_{t-j-r-1}; the
    // inner sum is one product with the stacked window w_{t-j-1..t-j-H}.
    let mut inner = Vector::zeros(m.d2);
    for j in 0..=h {
        let stacked = nalgebra::DVectorView::from_slice(&nw.as_slice()[(j + 1) * d1..(j + 1 + h) * d1], h * d1);
        inner.gemv(1.0, &mcat, &stacked, 0.0);
        y.gemv(1.0, cl.power_b(j), &inner, 1.0);
    }
    let mut v = -(&cl.k * &y);
    let recent = nalgebra::DVectorView::from_slice(&nw.as_slice()[..h * d1], h * d1);
    v.gemv(1.0, &mcat, &recent, 1.0);
    Ok((y, v))
}

/// Columns `noise[0..n]` as a `d1 x n` matrix.
fn window_matrix(noise: &[Vector], n: usize, d1: usize) -> Result<Mat> {
    let mut nw = Mat::zeros(d1, n);
    for (i, w) in noise.iter().take(n).enumerate() {
        check_len("disturbance", w.len(), d1)?;
        nw.set_column(i, w);
    }
    Ok(nw)
}

/// `[M^[0] | M^[1] | ...]`.
fn hcat(blocks: &[Mat], d2: usize, d1: usize) -> Mat {
    let mut out = Mat::zeros(d2, blocks.len() * d1);
    for (r, b) in blocks.iter().enumerate() {
        out.columns_mut(r * d1, d1).copy_from(b);
    }
    out
}

/// `f_{i,t}(M, ..., M)`.
pub fn surrogate_cost_invariant<C: StageCost + ?Sized>(
    cost: &C,
    agent: usize,
    t: usize,
    cl: &ClosedLoop,
    m: &DfcParams,
    noise: &[Vector],
) -> Result<f64> {
    let (y, v) = surrogate_pair_invariant(cl, m, noise)?;
    Ok(cost.eval(agent, t, &y, &v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Analytic,
    FiniteDifference,
}

/// Gradient of `f_{i,t}(M, ..., M)` with respect to the time-invariant `M`.
pub fn grad_surrogate_cost<C: StageCost + ?Sized>(
    cost: &C,
    agent: usize,
    t: usize,
    cl: &ClosedLoop,
    m: &DfcParams,
    noise: &[Vector],
    method: GradientMethod,
) -> Result<DfcParams> {
    match method {
        GradientMethod::Analytic => {
            let stage = cost.quadratic(agent, t).ok_or_else(|| {
                Error::UnsupportedCost("analytic gradient needs quadratic stage costs".into())
            })?;
            let (y, v) = surrogate_pair_invariant(cl, m, noise)?;
            let (gy, gv) = stage.grad(&y, &v);
            Ok(chain_rule(cl, m.h, &gy, &gv, noise))
        }
        GradientMethod::FiniteDifference => finite_difference_grad(cost, agent, t, cl, m, noise),
    }
}

/// Pull `(dc/dy, dc/dv)` back to the DFC blocks.
///
/// `y` depends on `M^[r]` through `(A-BK)^j B M^[r] w_{t-j-r-1}` and `v`
/// through `-K y + M^[r] w_{t-r}`.
pub(crate) fn chain_rule(cl: &ClosedLoop, h: usize, gy: &Vector, gv: &Vector, noise: &[Vector]) -> DfcParams {
    let g_total = gy - cl.k.transpose() * gv;
    let (d2, d1) = (cl.d2(), cl.d1());
    // column j of z is ((A-BK)^j B)^T g_total
    let mut z = Mat::zeros(d2, h + 1);
    for j in 0..=h {
        z.set_column(j, &(cl.power_b(j).tr_mul(&g_total)));
    }
    let mut nw = Mat::zeros(d1, 2 * h + 1);
    for (i, w) in noise.iter().take(2 * h + 1).enumerate() {
        nw.set_column(i, w);
    }
    let blocks = (0..h)
        .map(|r| {
            let mut g = gv * noise[r].transpose();
            g.gemm(1.0, &z, &nw.columns(r + 1, h + 1).transpose(), 1.0);
            g
        })
        .collect();
    DfcParams { h, d1, d2, blocks }
}

fn finite_difference_grad<C: StageCost + ?Sized>(
    cost: &C,
    agent: usize,
    t: usize,
    cl: &ClosedLoop,
    m: &DfcParams,
    noise: &[Vector],
) -> Result<DfcParams> {
    let step = 1e-6 * (1.0 + m.frobenius());
    let base = m.to_vec();
    let mut grad = Vector::zeros(base.len());
    for idx in 0..base.len() {
        let mut plus = base.clone();
        plus[idx] += step;
        let mut minus = base.clone();
        minus[idx] -= step;
        let fp = surrogate_cost_invariant(cost, agent, t, cl, &DfcParams::from_vec(&plus, m.h, m.d2, m.d1), noise)?;
        let fm = surrogate_cost_invariant(cost, agent, t, cl, &DfcParams::from_vec(&minus, m.h, m.d2, m.d1), noise)?;
        grad[idx] = (fp - fm) / (2.0 * step);
    }
    Ok(DfcParams::from_vec(&grad, m.h, m.d2, m.d1))
}

/// Affine form of the time-invariant surrogate pair:
/// `y = y0 + jy * vec(M)`, `v = v0 + jv * vec(M)` with `vec` as in
/// [`DfcParams::to_vec`].
#[derive(Debug, Clone)]
pub struct SurrogateAffine {
    pub y0: Vector,
    pub v0: Vector,
    pub jy: Mat,
    pub jv: Mat,
}

impl SurrogateAffine {
    pub fn new(cl: &ClosedLoop, h: usize, noise: &[Vector]) -> Result<Self> {
        check_surrogate_inputs(cl, h, noise)?;
        let (d1, d2) = (cl.d1(), cl.d2());
        let per = d1 * d2;
        let n = h * per;
        let mut y0 = Vector::zeros(d1);
        for (i, w) in noise.iter().enumerate().take(h + 1) {
            y0 += cl.power(i) * w;
        }
        let v0 = -(&cl.k * &y0);
        let mut jy = Mat::zeros(d1, n);
        let mut jv = Mat::zeros(d2, n);
        for r in 0..h {
            for j in 0..=h {
                let pb = cl.power_b(j);
                let w = &noise[j + r + 1];
                for b in 0..d1 {
                    if w[b] == 0.0 {
                        continue;
                    }
                    for a in 0..d2 {
                        let col = r * per + b * d2 + a;
                        let mut c = jy.column_mut(col);
                        c.axpy(w[b], &pb.column(a), 1.0);
                    }
                }
            }
            let w = &noise[r];
            for b in 0..d1 {
                for a in 0..d2 {
                    jv[(a, r * per + b * d2 + a)] += w[b];
                }
            }
        }
        jv -= &cl.k * &jy;
        Ok(SurrogateAffine { y0, v0, jy, jv })
    }

    pub fn eval(&self, m: &Vector) -> (Vector, Vector) {
        (&self.y0 + &self.jy * m, &self.v0 + &self.jv * m)
    }
}

/// Comparator `M_*^[i] = (K - K*)(A - BK*)^i`, checked against `set`.
pub fn comparator_params(
    k: &Mat,
    k_star: &Mat,
    sys: &SystemParams,
    h: usize,
    set: Option<&DfcSet>,
) -> Result<DfcParams> {
    check_dims("K", k.shape(), (sys.d2(), sys.d1()))?;
    check_dims("K*", k_star.shape(), (sys.d2(), sys.d1()))?;
    let diff = k - k_star;
    let cl_star = sys.closed_loop(k_star);
    let mut power = Mat::identity(sys.d1(), sys.d1());
    let mut blocks = Vec::with_capacity(h);
    for _ in 0..h {
        blocks.push(&diff * &power);
        power = &cl_star * power;
    }
    let m = DfcParams { h, d1: sys.d1(), d2: sys.d2(), blocks };
    if let Some(set) = set {
        for (i, b) in m.blocks.iter().enumerate() {
            let norm = linalg::spectral_norm(b);
            let radius = set.radius(i);
            if norm > radius * (1.0 + 1e-12) {
                return Err(Error::NotInSet { block: i, norm, radius });
            }
        }
    }
    Ok(m)
}

/// Bound `D` on states and actions for DFC policies drawn from
/// a set of radius scale `c`, given a `(kappa, gamma)` certificate, `|B| <=
/// kappa_b` and `|w| <= w`. Infinite when the series does not contract.
pub fn state_bound(kappa: f64, gamma: f64, kappa_b: f64, c: f64, h: usize, w: f64) -> f64 {
    let contraction = kappa * kappa * (1.0 - gamma).powi(h as i32 + 1);
    if contraction >= 1.0 {
        return f64::INFINITY;
    }
    w * (kappa * kappa + h as f64 * kappa_b * kappa * kappa * c) / (gamma * (1.0 - contraction)) + w * c / gamma
}

/// Rolls out the time-invariant DFC `m` from `x_1 = 0` on `noise[t-1] = w_t`
/// and returns `max_t |x_{t+1} - y_{t+1}|`, the truncation error of the
/// surrogate state.
pub fn surrogate_gap(cl: &ClosedLoop, m: &DfcParams, noise: &[Vector]) -> Result<f64> {
    let h = m.h;
    if cl.max_power() < h {
        return Err(Error::IndexOutOfRange(format!("closed loop caches {} powers, need {h}", cl.max_power())));
    }
    let window = vec![m.clone(); h + 1];
    let mut hist = crate::lti::NoiseHistory::new(cl.d1(), 2 * h + 1);
    let mut x = Vector::zeros(cl.d1());
    let mut gap: f64 = 0.0;
    for w in noise {
        let u = dfc_action(&cl.k, &x, m, &hist.recent(h))?;
        x = crate::lti::step(&x, &u, w, &cl.sys)?;
        hist.push(w.clone());
        let y = surrogate_state(cl, &window, &hist.recent(2 * h + 1))?;
        gap = gap.max((&x - y).norm());
    }
    Ok(gap)
}
