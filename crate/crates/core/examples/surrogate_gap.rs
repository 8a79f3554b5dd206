//! The truncated-memory surrogate state tracks the true state with an error
//! that shrinks like (1 - gamma)^H, and the comparator DFC built from another
//! gain reproduces that gain's closed loop exactly.

use netctl::dfc::{comparator_params, surrogate_gap, transfer_matrix, ClosedLoop, DfcParams, DfcSet};
use netctl::linalg::{Mat, Vector};
use netctl::lti::{NoiseKind, NoiseSchedule, SystemParams};
use netctl::regret::log_log_fit;
use netctl::stability::certify_strong_stability;

fn main() -> netctl::Result<()> {
    let a = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
    let sys = SystemParams::new(a.clone(), Mat::identity(2, 2))?;
    // A - BK = diag(0.7, 0.2)
    let k = &a - Mat::from_diagonal(&Vector::from_vec(vec![0.7, 0.2]));
    let cert = certify_strong_stability(&k, &sys)?;
    let noise = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 3, 2).sequence(1000);

    let mut points = Vec::new();
    for h in [2, 4, 6, 8, 10, 12] {
        let cl = ClosedLoop::new(&sys, &k, 2 * h + 1)?;
        let set = DfcSet::standard(cert.kappa, cert.gamma, h)?;
        let shape = Mat::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.4]);
        let m = DfcParams::from_blocks((0..h).map(|i| &shape * (0.5 * set.radius(i))).collect())?;
        let gap = surrogate_gap(&cl, &m, &noise)?;
        println!("H={h:>2}  max |x - y| = {gap:.3e}");
        points.push(((h as f64).exp(), gap));
    }
    let fit = log_log_fit(&points);
    println!("decay per unit H: {:.4} (log(1 - gamma) = {:.4})", fit.slope, (1.0 - cert.gamma).ln());

    let k_star = Mat::from_row_slice(2, 2, &[0.1, 0.0, 0.05, 0.2]);
    let h = 8;
    let cl = ClosedLoop::new(&sys, &k, 2 * h)?;
    let m_star = comparator_params(&k, &k_star, &sys, h, None)?;
    let window = vec![m_star; h + 1];
    let target = sys.closed_loop(&k_star);
    let worst = (0..=h)
        .map(|i| Ok((transfer_matrix(&cl, h, i, &window)? - target.pow(i as u32)).norm()))
        .collect::<netctl::Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("comparator identity, max over i <= {h}: {worst:.2e}");
    Ok(())
}
