//! Explore-then-commit with unknown dynamics: identify (A, B) jointly, then
//! learn on per-agent estimates, recovering disturbances from the estimated
//! model. Checks the per-round disturbance error against zeta * eps.

use netctl::known::{run_known, KnownRunConfig};
use netctl::linalg::Mat;
use netctl::lti::{CostStream, NoiseKind, NoiseSchedule, SystemParams};
use netctl::network::{build_topology, metropolis_weights, TopologyKind};
use netctl::regret::{dfc_rollout_cost, mean_regret, offline_optimal_dfc};
use netctl::unknown::{run_unknown, UnknownRunConfig};

fn main() -> netctl::Result<()> {
    let t = 20000;
    let sys = SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2))?;
    let mixing = metropolis_weights(&build_topology(TopologyKind::Ring, 4, 0)?)?;
    let costs = CostStream::drifting(4, Mat::identity(2, 2) * 0.25, Mat::identity(2, 2) * 0.0625, 0.1, 0.05, 0.3);
    let noise = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 0, 2);
    let base = KnownRunConfig::new(sys.clone(), Some(Mat::zeros(2, 2)), mixing, costs.clone(), noise.clone(), t)?;

    let mut cfg = UnknownRunConfig::new(base.clone())?;
    // Long exploration so the estimate is accurate enough for the zeta * eps bound.
    cfg.t_collect = 12000;
    let run = run_unknown(&cfg)?;
    let r = &run.report;
    println!("T_collect={} T_exchange={} q={}", r.t_collect, r.t_exchange, r.q);
    println!("per-agent eps: {:?}", r.eps.as_ref().expect("truth supplied"));
    let check = run.noise_bound_check();
    println!(
        "eps={:.4} (limit {:.4}), max |w - w_hat|={:.4} <= zeta*eps={:.3}: {}",
        check.eps,
        check.eps_limit,
        check.max_noise_err,
        check.zeta * check.eps,
        check.bound_holds
    );
    println!("equivalent-world residual {:.1e}", run.equivalent_world_residual);

    let w = noise.sequence(t);
    let best = offline_optimal_dfc(&w, &costs, &base.set()?, &sys, &base.k, t)?;
    let j_star = dfc_rollout_cost(&best.params, &base.k, &sys, &w, &costs, t)?;
    let known = run_known(&base)?;
    println!(
        "mean regret: unknown dynamics {:.2}, known dynamics {:.2}",
        mean_regret(&run.trace, j_star)?,
        mean_regret(&known, j_star)?
    );
    Ok(())
}
