//! Multi-agent LTI world: dynamics, bounded adversarial disturbances and
//! time-varying convex stage costs.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_dims, check_len, Mat, Vector};

/// The shared pair `(A, B)` with its norm bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    #[serde(with = "linalg::rows")]
    pub a: Mat,
    #[serde(with = "linalg::rows")]
    pub b: Mat,
    pub kappa_sys: f64,
}

impl SystemParams {
    /// `kappa_sys` is set to `max(|A|, |B|)`.
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        let kappa = linalg::spectral_norm(&a).max(linalg::spectral_norm(&b));
        Self::with_kappa(a, b, kappa)
    }

    pub fn with_kappa(a: Mat, b: Mat, kappa_sys: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, A is {}x{}",
                b.nrows(),
                a.nrows(),
                a.ncols()
            )));
        }
        let na = linalg::spectral_norm(&a);
        let nb = linalg::spectral_norm(&b);
        if na > kappa_sys + 1e-10 || nb > kappa_sys + 1e-10 {
            return Err(Error::InvalidSize(format!(
                "kappa_sys {kappa_sys} below max(|A|={na}, |B|={nb})"
            )));
        }
        Ok(SystemParams { a, b, kappa_sys })
    }

    pub fn d1(&self) -> usize {
        self.a.nrows()
    }

    pub fn d2(&self) -> usize {
        self.b.ncols()
    }

    /// `A - B K`.
    pub fn closed_loop(&self, k: &Mat) -> Mat {
        &self.a - &self.b * k
    }
}

/// `A x + B u + w`.
pub fn step(x: &Vector, u: &Vector, w: &Vector, sys: &SystemParams) -> Result<Vector> {
    check_len("state", x.len(), sys.d1())?;
    check_len("control", u.len(), sys.d2())?;
    check_len("noise", w.len(), sys.d1())?;
    Ok(&sys.a * x + &sys.b * u + w)
}

/// Inverse of [`step`]: `w = x_next - A x - B u`.
pub fn recover_noise(x_next: &Vector, x: &Vector, u: &Vector, sys: &SystemParams) -> Result<Vector> {
    check_len("next state", x_next.len(), sys.d1())?;
    check_len("state", x.len(), sys.d1())?;
    check_len("control", u.len(), sys.d2())?;
    Ok(x_next - &sys.a * x - &sys.b * u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Per-coordinate sinusoids with incommensurate frequencies and seeded phases.
    Sinusoid,
    /// `(-1)^t` times a constant direction.
    SignAlternating,
    /// Seeded draws, uniform in the `W`-ball, independent across rounds.
    UniformBounded,
    Constant,
}

/// Deterministic bounded disturbance generator with `|w_t| <= W` and `w_t = 0`
/// for `t <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: NoiseKind,
    #[serde(rename = "amplitude")]
    pub w: f64,
    pub seed: u64,
    pub d1: usize,
}

const PRIMES: [f64; 12] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0];

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl NoiseSchedule {
    pub fn new(kind: NoiseKind, w: f64, seed: u64, d1: usize) -> Self {
        NoiseSchedule { kind, w, seed, d1 }
    }

    /// Schedule used by agent `agent` when disturbances are not shared.
    pub fn for_agent(&self, agent: usize) -> Self {
        NoiseSchedule { seed: mix_seed(self.seed, 1 + agent as u64), ..self.clone() }
    }

    fn frequency(k: usize) -> f64 {
        PRIMES[k % PRIMES.len()].sqrt() * (1.0 + (k / PRIMES.len()) as f64)
    }

    fn phase(&self, k: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0x5149));
        let mut phi = 0.0;
        for _ in 0..=k {
            phi = rng.gen::<f64>() * 2.0 * PI;
        }
        phi
    }

    fn sinusoid(&self, t: f64) -> Vector {
        let scale = self.w / (self.d1 as f64).sqrt();
        Vector::from_fn(self.d1, |k, _| scale * (Self::frequency(k) * t + self.phase(k)).sin())
    }

    /// Disturbance at round `t`.
    pub fn noise_at(&self, t: i64) -> Vector {
        if t <= 0 || self.d1 == 0 || self.w == 0.0 {
            return Vector::zeros(self.d1);
        }
        let scale = self.w / (self.d1 as f64).sqrt();
        match self.kind {
            NoiseKind::Sinusoid => self.sinusoid(t as f64),
            NoiseKind::SignAlternating => {
                let s = if t % 2 == 0 { 1.0 } else { -1.0 };
                Vector::from_element(self.d1, s * scale)
            }
            NoiseKind::Constant => Vector::from_element(self.d1, scale),
            NoiseKind::UniformBounded => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, t as u64));
                loop {
                    let v = Vector::from_fn(self.d1, |_, _| rng.gen_range(-1.0..=1.0));
                    if v.norm() <= 1.0 {
                        return v * self.w;
                    }
                }
            }
        }
    }

    /// `w_1, ..., w_T`.
    pub fn sequence(&self, t_max: usize) -> Vec<Vector> {
        (1..=t_max as i64).map(|t| self.noise_at(t)).collect()
    }
}

/// Per-round quadratic stage data: `(x-g)^T Q (x-g) + u^T R u`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStage {
    pub q: Mat,
    pub r: Mat,
    pub target: Vector,
}

impl QuadraticStage {
    pub fn eval(&self, x: &Vector, u: &Vector) -> f64 {
        let e = x - &self.target;
        e.dot(&(&self.q * &e)) + u.dot(&(&self.r * u))
    }

    pub fn grad(&self, x: &Vector, u: &Vector) -> (Vector, Vector) {
        let e = x - &self.target;
        (2.0 * (&self.q * e), 2.0 * (&self.r * u))
    }
}

/// A family of convex per-agent stage costs `c_{i,t}(x, u)`.
pub trait StageCost {
    fn agents(&self) -> usize;

    fn eval(&self, agent: usize, t: usize, x: &Vector, u: &Vector) -> f64;

    /// Gradient with respect to `(x, u)`.
    fn grad(&self, agent: usize, t: usize, x: &Vector, u: &Vector) -> (Vector, Vector);

    /// Quadratic coefficients, when the cost has that form.
    fn quadratic(&self, _agent: usize, _t: usize) -> Option<QuadraticStage> {
        None
    }

    /// Network cost `c_t = sum_i c_{i,t}`.
    fn network(&self, t: usize, x: &Vector, u: &Vector) -> f64 {
        (0..self.agents()).map(|i| self.eval(i, t, x, u)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Fixed `Q`, `R`; per-agent targets rotating at rate `omega`.
    QuadraticTracking,
    /// As tracking, with per-agent weights oscillating by a factor `1 +/- drift`.
    QuadraticDrift,
}

/// Time-varying quadratic tracking costs with heterogeneous per-agent targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostStream {
    pub kind: CostKind,
    pub m: usize,
    #[serde(with = "linalg::rows")]
    pub q: Mat,
    #[serde(with = "linalg::rows")]
    pub r: Mat,
    /// Radius of the rotating targets.
    pub target_radius: f64,
    /// Rotation rate of the targets (radians per round).
    pub omega: f64,
    /// Relative weight oscillation for [`CostKind::QuadraticDrift`].
    pub drift: f64,
}

impl CostStream {
    pub fn tracking(m: usize, q: Mat, r: Mat, target_radius: f64, omega: f64) -> Self {
        CostStream { kind: CostKind::QuadraticTracking, m, q, r, target_radius, omega, drift: 0.0 }
    }

    pub fn drifting(m: usize, q: Mat, r: Mat, target_radius: f64, omega: f64, drift: f64) -> Self {
        CostStream { kind: CostKind::QuadraticDrift, m, q, r, target_radius, omega, drift }
    }

    pub fn validate(&self, d1: usize, d2: usize) -> Result<()> {
        check_dims("Q", self.q.shape(), (d1, d1))?;
        check_dims("R", self.r.shape(), (d2, d2))?;
        for (name, m) in [("Q", &self.q), ("R", &self.r)] {
            if (m - m.transpose()).norm() > 1e-12 {
                return Err(Error::config(name, "must be symmetric"));
            }
            let eig = m.clone().symmetric_eigen();
            if eig.eigenvalues.iter().any(|&e| e < -1e-12) {
                return Err(Error::config(name, "must be positive semidefinite"));
            }
        }
        if !(0.0..1.0).contains(&self.drift) {
            return Err(Error::config("drift", "must lie in [0, 1)"));
        }
        if self.m == 0 {
            return Err(Error::config("m", "at least one agent"));
        }
        Ok(())
    }

    fn agent_phase(&self, agent: usize) -> f64 {
        2.0 * PI * agent as f64 / self.m as f64
    }

    pub fn target(&self, agent: usize, t: usize) -> Vector {
        let d1 = self.q.nrows();
        let theta = self.omega * t as f64 + self.agent_phase(agent);
        let mut g = Vector::zeros(d1);
        if d1 >= 1 {
            g[0] = self.target_radius * theta.cos();
        }
        if d1 >= 2 {
            g[1] = self.target_radius * theta.sin();
        }
        g
    }

    pub fn stage(&self, agent: usize, t: usize) -> QuadraticStage {
        let target = self.target(agent, t);
        match self.kind {
            CostKind::QuadraticTracking => QuadraticStage { q: self.q.clone(), r: self.r.clone(), target },
            CostKind::QuadraticDrift => {
                let theta = 3.0 * self.omega * t as f64 + self.agent_phase(agent);
                QuadraticStage {
                    q: &self.q * (1.0 + self.drift * theta.sin()),
                    r: &self.r * (1.0 + self.drift * theta.cos()),
                    target,
                }
            }
        }
    }

    /// Constant `G_c` with `|grad c| <= G_c D` whenever `|x|, |u| <= D`.
    pub fn gradient_scale(&self, d: f64) -> f64 {
        let qn = linalg::spectral_norm(&self.q) * (1.0 + self.drift);
        let rn = linalg::spectral_norm(&self.r) * (1.0 + self.drift);
        2.0 * qn * (1.0 + self.target_radius / d.max(1e-12)) + 2.0 * rn
    }
}

impl StageCost for CostStream {
    fn agents(&self) -> usize {
        self.m
    }

    fn eval(&self, agent: usize, t: usize, x: &Vector, u: &Vector) -> f64 {
        self.stage(agent, t).eval(x, u)
    }

    fn grad(&self, agent: usize, t: usize, x: &Vector, u: &Vector) -> (Vector, Vector) {
        self.stage(agent, t).grad(x, u)
    }

    fn quadratic(&self, agent: usize, t: usize) -> Option<QuadraticStage> {
        Some(self.stage(agent, t))
    }
}

/// Most-recent-first buffer of past disturbances; missing entries read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseHistory {
    buf: VecDeque<Vector>,
    capacity: usize,
    dim: usize,
}

impl NoiseHistory {
    pub fn new(dim: usize, capacity: usize) -> Self {
        NoiseHistory { buf: VecDeque::with_capacity(capacity + 1), capacity, dim }
    }

    pub fn push(&mut self, w: Vector) {
        self.buf.push_front(w);
        if self.buf.len() > self.capacity {
            self.buf.pop_back();
        }
    }

    /// `lag(0)` is the newest entry.
    pub fn lag(&self, k: usize) -> Vector {
        self.buf.get(k).cloned().unwrap_or_else(|| Vector::zeros(self.dim))
    }

    /// The newest `n` entries, zero padded.
    pub fn recent(&self, n: usize) -> Vec<Vector> {
        (0..n).map(|k| self.lag(k)).collect()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// State and disturbance memory owned by one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: Vector,
    pub noise_history: NoiseHistory,
}

impl AgentState {
    /// Zero state with room for `2h + 1` past disturbances.
    pub fn new(d1: usize, h: usize) -> Self {
        AgentState { x: Vector::zeros(d1), noise_history: NoiseHistory::new(d1, 2 * h + 1) }
    }
}

/// One round of a closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub x: Vector,
    pub u: Vector,
}

/// Roll out `u_t = -K x_t` from `x_1 = 0` against `noise[t-1] = w_t`.
pub fn rollout_linear_policy(
    k: &Mat,
    sys: &SystemParams,
    noise: &[Vector],
    t_max: usize,
) -> Result<Vec<TrajectoryPoint>> {
    check_dims("K", k.shape(), (sys.d2(), sys.d1()))?;
    if noise.len() < t_max {
        return Err(Error::DimensionMismatch(format!(
            "noise sequence has {} rounds, need {t_max}",
            noise.len()
        )));
    }
    let mut x = Vector::zeros(sys.d1());
    let mut out = Vec::with_capacity(t_max);
    for w in noise.iter().take(t_max) {
        let u = -(k * &x);
        let next = step(&x, &u, w, sys)?;
        out.push(TrajectoryPoint { x, u });
        x = next;
    }
    Ok(out)
}

/// A row of the per-agent trajectory export.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub agent: usize,
    pub x: Vector,
    pub u: Vector,
    pub w: Vector,
    pub cost: f64,
}

/// Write `t, agent, x0.., u0.., w0.., cost` rows.
pub fn write_trajectory_csv<W: Write>(out: &mut W, rows: &[TrajectoryRow]) -> Result<()> {
    let (d1, d2) = rows.first().map_or((0, 0), |r| (r.x.len(), r.u.len()));
    let mut header = vec!["t".to_string(), "agent".to_string()];
    header.extend((0..d1).map(|i| format!("x{i}")));
    header.extend((0..d2).map(|i| format!("u{i}")));
    header.extend((0..d1).map(|i| format!("w{i}")));
    header.push("cost".into());
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let mut fields = vec![r.t.to_string(), r.agent.to_string()];
        fields.extend(r.x.iter().map(|v| format!("{v:e}")));
        fields.extend(r.u.iter().map(|v| format!("{v:e}")));
        fields.extend(r.w.iter().map(|v| format!("{v:e}")));
        fields.push(format!("{:e}", r.cost));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn identity_dynamics() {
        let sys = SystemParams::new(Mat::identity(2, 2), Mat::zeros(2, 1)).unwrap();
        let x = step(&v(&[1.0, 2.0]), &v(&[5.0]), &v(&[0.0, 0.0]), &sys).unwrap();
        assert_eq!(x, v(&[1.0, 2.0]));
    }

    #[test]
    fn pure_input_dynamics() {
        let sys = SystemParams::new(Mat::zeros(1, 1), Mat::identity(1, 1)).unwrap();
        let x = step(&v(&[7.0]), &v(&[3.0]), &v(&[1.0]), &sys).unwrap();
        assert_eq!(x, v(&[4.0]));
    }

    #[test]
    fn step_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let sys = SystemParams::new(a.clone(), b.clone()).unwrap();
        let x = Vector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let u = Vector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let w = Vector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let got = step(&x, &u, &w, &sys).unwrap();
        for i in 0..3 {
            let mut acc = w[i];
            for j in 0..3 {
                acc += a[(i, j)] * x[j] + b[(i, j)] * u[j];
            }
            assert!((got[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn step_rejects_bad_dims() {
        let sys = SystemParams::new(Mat::identity(2, 2), Mat::zeros(2, 1)).unwrap();
        assert!(matches!(
            step(&v(&[1.0]), &v(&[0.0]), &v(&[0.0, 0.0]), &sys),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn recover_noise_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Mat::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b = Mat::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let sys = SystemParams::new(a, b).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = Vector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
            let u = Vector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let w = Vector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let next = step(&x, &u, &w, &sys).unwrap();
            worst = worst.max((recover_noise(&next, &x, &u, &sys).unwrap() - w).amax());
        }
        assert!(worst < 1e-12);
        let x = v(&[1.0, 0.0, 0.0, 2.0]);
        let u = v(&[0.5, -0.5]);
        let next = step(&x, &u, &Vector::zeros(4), &sys).unwrap();
        assert!(recover_noise(&next, &x, &u, &sys).unwrap().amax() < 1e-15);
    }

    #[test]
    fn noise_is_zero_before_start() {
        for kind in [NoiseKind::Sinusoid, NoiseKind::SignAlternating, NoiseKind::UniformBounded, NoiseKind::Constant] {
            let s = NoiseSchedule::new(kind, 1.0, 3, 2);
            assert_eq!(s.noise_at(-3), Vector::zeros(2));
            assert_eq!(s.noise_at(0), Vector::zeros(2));
        }
    }

    #[test]
    fn sinusoid_peaks_at_quarter_phase() {
        let s = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 9, 1);
        let omega = NoiseSchedule::frequency(0);
        let t_peak = (PI / 2.0 - s.phase(0)) / omega;
        assert!((s.sinusoid(t_peak)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_amplitude_uniform_is_silent() {
        let s = NoiseSchedule::new(NoiseKind::UniformBounded, 0.0, 1, 3);
        assert!((1..200).all(|t| s.noise_at(t) == Vector::zeros(3)));
    }

    #[test]
    fn noise_bounded_for_many_rounds() {
        for kind in [NoiseKind::Sinusoid, NoiseKind::SignAlternating, NoiseKind::UniformBounded, NoiseKind::Constant] {
            let s = NoiseSchedule::new(kind, 2.5, 17, 3);
            for t in 1..100_001i64 {
                assert!(s.noise_at(t).norm() <= 2.5 + 1e-12, "{kind:?} at t={t}");
            }
        }
    }

    #[test]
    fn noise_is_deterministic() {
        let s = NoiseSchedule::new(NoiseKind::UniformBounded, 1.0, 42, 2);
        assert_eq!(s.sequence(50), s.clone().sequence(50));
        assert_ne!(s.sequence(50), s.for_agent(1).sequence(50));
    }

    #[test]
    fn rollout_zero_noise_is_zero() {
        let sys = SystemParams::new(Mat::from_element(1, 1, 0.5), Mat::identity(1, 1)).unwrap();
        let noise = vec![Vector::zeros(1); 10];
        let traj = rollout_linear_policy(&Mat::from_element(1, 1, 0.2), &sys, &noise, 10).unwrap();
        assert!(traj.iter().all(|p| p.x[0] == 0.0 && p.u[0] == 0.0));
    }

    #[test]
    fn rollout_scalar_hand_recursion() {
        let sys = SystemParams::new(Mat::from_element(1, 1, 0.5), Mat::identity(1, 1)).unwrap();
        let noise = vec![v(&[1.0]); 3];
        let traj = rollout_linear_policy(&Mat::from_element(1, 1, 0.2), &sys, &noise, 3).unwrap();
        let xs: Vec<f64> = traj.iter().map(|p| p.x[0]).collect();
        let expect = [0.0, 1.0, 1.3];
        for (a, b) in xs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        for p in &traj {
            assert!((p.u[0] + 0.2 * p.x[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn cost_stream_validation() {
        let c = CostStream::tracking(3, Mat::identity(2, 2), Mat::identity(1, 1), 1.0, 0.01);
        assert!(c.validate(2, 1).is_ok());
        let bad = CostStream::tracking(3, -Mat::identity(2, 2), Mat::identity(1, 1), 1.0, 0.01);
        assert!(bad.validate(2, 1).is_err());
    }

    #[test]
    fn cost_gradient_scale_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = CostStream::drifting(4, Mat::identity(2, 2) * 2.0, Mat::identity(2, 2) * 0.5, 1.5, 0.02, 0.4);
        let d = 3.0;
        let gc = c.gradient_scale(d);
        for t in 0..500 {
            let mut x = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let mut u = Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            x *= d / x.norm();
            u *= d / u.norm();
            let (gx, gu) = c.grad(t % 4, t, &x, &u);
            assert!((gx.norm_squared() + gu.norm_squared()).sqrt() <= gc * d + 1e-9);
        }
    }

    #[test]
    fn trajectory_csv_header() {
        let rows = vec![TrajectoryRow { t: 1, agent: 0, x: v(&[1.0, 2.0]), u: v(&[0.5]), w: v(&[0.0, 0.1]), cost: 3.0 }];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,agent,x0,x1,u0,w0,w1,cost\n"));
        assert_eq!(s.lines().count(), 2);
    }
}
