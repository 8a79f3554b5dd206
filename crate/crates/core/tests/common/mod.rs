//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use netctl::dfc::{dfc_action, grad_surrogate_cost, project_to_set, ClosedLoop, DfcParams};
use netctl::known::KnownRunConfig;
use netctl::linalg::{Mat, Vector};
use netctl::lti::{CostStream, StageCost, SystemParams};

/// `A = [[0.5, 0.1], [0.1, 0.3]]`, `B = I`; with `K = 0` it is (1, 0.459)-strongly stable.
pub fn desk_sys() -> SystemParams {
    SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2)).unwrap()
}

/// Drifting quadratic tracking costs, small enough that `eta * L` stays well
/// below one at the default step size.
pub fn desk_costs(m: usize) -> CostStream {
    CostStream::drifting(m, Mat::identity(2, 2) * 0.25, Mat::identity(2, 2) * 0.0625, 0.1, 0.05, 0.3)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Single-learner DFC with online projected gradient descent, written
/// without any gossip machinery. Returns `(x_t, u_t, cost_t)` per round.
pub fn centralized_reference(cfg: &KnownRunConfig) -> Vec<(Vector, Vector, f64)> {
    let (sys, k, h) = (&cfg.sys, &cfg.k, cfg.h);
    let set = cfg.set().unwrap();
    let cl = ClosedLoop::new(sys, k, h).unwrap();
    let mut m = DfcParams::zeros(h, sys.d2(), sys.d1());
    let mut x = Vector::zeros(sys.d1());
    let mut past: Vec<Vector> = Vec::new(); // newest first
    let lag = |past: &Vec<Vector>, n: usize| -> Vec<Vector> {
        (0..n).map(|j| past.get(j).cloned().unwrap_or_else(|| Vector::zeros(sys.d1()))).collect()
    };
    let mut out = Vec::new();
    for t in 1..=cfg.horizon {
        let u = dfc_action(k, &x, &m, &lag(&past, h)).unwrap();
        let cost = cfg.costs.network(t, &x, &u);
        let w = cfg.noise.noise_at(t as i64);
        let x_next = &sys.a * &x + &sys.b * &u + &w;
        let w_hat = &x_next - &sys.a * &x - &sys.b * &u;
        past.insert(0, w_hat);
        let g = grad_surrogate_cost(&cfg.costs, 0, t, &cl, &m, &lag(&past, 2 * h + 1), cfg.gradient).unwrap();
        out.push((x, u, cost));
        m.axpy(-cfg.eta, &g);
        m = project_to_set(&m, &set).unwrap();
        x = x_next;
    }
    out
}
