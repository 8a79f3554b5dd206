//! Joint identification: agents probe with Rademacher inputs, form moment
//! estimates, average them by gossip and recover (A, B). Error falls like
//! 1/sqrt(T_collect) and with the number of agents.

use netctl::linalg::Mat;
use netctl::lti::{NoiseKind, NoiseSchedule, SystemParams};
use netctl::network::{build_topology, metropolis_weights, TopologyKind};
use netctl::regret::log_log_fit;
use netctl::stability::certify_strong_stability;
use netctl::sysid::{default_t_exchange, identify, ReportConstants};

fn main() -> netctl::Result<()> {
    let sys = SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2))?;
    let k = Mat::zeros(2, 2);
    let cert = certify_strong_stability(&k, &sys)?;
    let c = ReportConstants { kappa: cert.kappa.max(1.0), gamma: cert.gamma, w: 1.0, delta: 0.05 };
    let noise = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 0, 2);

    for m in [2, 4, 8] {
        let mixing = metropolis_weights(&build_topology(TopologyKind::Ring, m, 0)?)?;
        let mut points = Vec::new();
        for tc in [2000, 4000, 8000, 16000] {
            let tex = default_t_exchange(tc, mixing.beta);
            let report = identify(&sys, &k, &mixing, &noise, tc, tex, 1, 1, c)?;
            let eps = report.eps_mean().expect("truth supplied");
            println!(
                "m={m} T_collect={tc:>5}: mean eps {eps:.4}, spread across agents {:.1e}, rate template {:.3}",
                report.eps_cross, report.rate_bound
            );
            points.push((tc as f64, eps));
        }
        println!("m={m}: log-log slope {:.3}\n", log_log_fit(&points).slope);
    }
    Ok(())
}
