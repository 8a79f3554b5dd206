//! Five agents on a ring learn DFCs by gossip + projected gradient steps on
//! their own drifting costs; regret is measured against the best fixed DFC in
//! hindsight and a grid of linear policies.

use netctl::known::{run_known, KnownRunConfig};
use netctl::linalg::Mat;
use netctl::lti::{CostStream, NoiseKind, NoiseSchedule, SystemParams};
use netctl::network::{build_topology, metropolis_weights, TopologyKind};
use netctl::regret::{
    best_linear_in_hindsight, dfc_rollout_cost, individual_regret, mean_regret, offline_optimal_dfc, PolicyGrid,
};

fn main() -> netctl::Result<()> {
    let t = 4000;
    let sys = SystemParams::new(Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]), Mat::identity(2, 2))?;
    let mixing = metropolis_weights(&build_topology(TopologyKind::Ring, 5, 0)?)?;
    let costs = CostStream::drifting(5, Mat::identity(2, 2) * 0.25, Mat::identity(2, 2) * 0.0625, 0.1, 0.05, 0.3);
    let noise = NoiseSchedule::new(NoiseKind::Sinusoid, 1.0, 0, 2);
    let cfg = KnownRunConfig::new(sys.clone(), Some(Mat::zeros(2, 2)), mixing, costs.clone(), noise.clone(), t)?;
    println!("H={} eta={:.4} beta={:.3} state bound D={:.2}", cfg.h, cfg.eta, cfg.mixing.beta, cfg.state_bound());

    let trace = run_known(&cfg)?;
    let last = trace.consensus.len() - 1;
    println!(
        "consensus distance at T: {:.2e} (bound {:.2e}); max |x| = {:.3}",
        trace.consensus[last], trace.consensus_bound[last], trace.max_state_norm
    );

    let w = noise.sequence(t);
    let best = offline_optimal_dfc(&w, &costs, &cfg.set()?, &sys, &cfg.k, t)?;
    let j_star = dfc_rollout_cost(&best.params, &cfg.k, &sys, &w, &costs, t)?;
    println!("best fixed DFC: J*={j_star:.2} ({} iterations, converged={})", best.iterations, best.converged);
    for j in 0..cfg.m() {
        println!("  agent {j}: regret {:.3}", individual_regret(&trace, j, j_star)?);
    }

    let grid = PolicyGrid::axis(&sys, &cfg.k, 0.3, 3)?;
    let choice = best_linear_in_hindsight(&w, &costs, &grid, &sys, t)?;
    println!(
        "best of {} linear gains: J*={:.2}, mean regret {:.3} (vs {:.3} against the DFC)",
        grid.len(),
        choice.j_star,
        mean_regret(&trace, choice.j_star)?,
        mean_regret(&trace, j_star)?
    );
    Ok(())
}
