//! Gossip matrices for a few topologies: mixing factor beta and the
//! geometric consensus bound `sum_j |[P^k]_ji - 1/m| <= sqrt(m) beta^k`.

use netctl::network::{build_topology, metropolis_weights, verify_mixing_bound, TopologyKind};

fn main() -> netctl::Result<()> {
    let m = 8;
    for kind in [
        TopologyKind::Complete,
        TopologyKind::Ring,
        TopologyKind::Path,
        TopologyKind::Grid,
        TopologyKind::ErdosRenyi { p: 0.4 },
    ] {
        let g = build_topology(kind, m, 7)?;
        let mix = metropolis_weights(&g)?;
        let report = verify_mixing_bound(&mix, 50)?;
        println!(
            "{:<28} edges={:>2} beta={:.4} worst lhs/rhs={:.3} deviation at k=10: {:.2e}",
            format!("{kind:?}"),
            g.edges.len(),
            mix.beta,
            report.max_ratio,
            report.deviation[9]
        );
    }
    Ok(())
}
