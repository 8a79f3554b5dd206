//! Regret growth with the horizon on a ring and on the complete graph:
//! log-log slope near 1/2, and better-connected networks regret less.

use netctl::known::{run_known, KnownRunConfig};
use netctl::linalg::Mat;
use netctl::lti::{CostStream, NoiseKind, NoiseSchedule, SystemParams};
use netctl::network::{build_topology, metropolis_weights, TopologyKind};
use netctl::regret::{dfc_rollout_cost, mean_regret, offline_optimal_dfc, regret_slope};

fn main() -> netctl::Result<()> {
    let sys = SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2))?;
    let costs = CostStream::drifting(5, Mat::identity(2, 2) * 0.25, Mat::identity(2, 2) * 0.0625, 0.1, 0.05, 0.3);
    let noise = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 0, 2);
    let horizons = [1000, 2000, 4000, 8000];

    for kind in [TopologyKind::Ring, TopologyKind::Complete] {
        let mixing = metropolis_weights(&build_topology(kind, 5, 0)?)?;
        let mut points = Vec::new();
        for &t in &horizons {
            let cfg = KnownRunConfig::new(sys.clone(), Some(Mat::zeros(2, 2)), mixing.clone(), costs.clone(), noise.clone(), t)?;
            let w = noise.sequence(t);
            let best = offline_optimal_dfc(&w, &costs, &cfg.set()?, &sys, &cfg.k, t)?;
            let j_star = dfc_rollout_cost(&best.params, &cfg.k, &sys, &w, &costs, t)?;
            let regret = mean_regret(&run_known(&cfg)?, j_star)?;
            println!("{kind:?} (beta {:.3}) T={t:>5}: regret {regret:.3}", mixing.beta);
            points.push((t as f64, regret));
        }
        let fit = regret_slope(&points)?;
        println!("{kind:?}: slope {:.3}, r2 {:.4}\n", fit.slope, fit.r2);
    }
    Ok(())
}
