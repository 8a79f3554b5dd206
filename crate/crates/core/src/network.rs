//! Communication topologies and doubly stochastic gossip matrices.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Maximum number of Erdos-Renyi redraws before giving up on connectivity.
pub const ER_MAX_RETRIES: usize = 1000;

/// Tolerance on row/column sums and symmetry at construction time.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyKind {
    Complete,
    Ring,
    Path,
    Grid,
    ErdosRenyi { p: f64 },
    /// Edge list supplied by the caller.
    Custom,
}

/// Undirected communication graph over agents `0..m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub m: usize,
    pub edges: Vec<(usize, usize)>,
    pub kind: TopologyKind,
    pub seed: u64,
}

impl Topology {
    /// Graph from an explicit edge list. Self-loops and duplicates are rejected.
    pub fn from_edges(m: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidSize("topology needs at least one agent".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in &edges {
            if a >= m || b >= m {
                return Err(Error::InvalidSize(format!("edge ({a},{b}) outside 0..{m}")));
            }
            if a == b {
                return Err(Error::InvalidSize(format!("self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidSize(format!("duplicate edge ({a},{b})")));
            }
        }
        Ok(Topology { m, edges, kind: TopologyKind::Custom, seed: 0 })
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        if self.m == 0 {
            return false;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; self.m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Build a connected topology of the requested family.
pub fn build_topology(kind: TopologyKind, m: usize, seed: u64) -> Result<Topology> {
    if m == 0 {
        return Err(Error::InvalidSize("topology needs at least one agent".into()));
    }
    let edges = match kind {
        TopologyKind::Complete => {
            let mut e = Vec::with_capacity(m * (m - 1) / 2);
            for a in 0..m {
                for b in a + 1..m {
                    e.push((a, b));
                }
            }
            e
        }
        TopologyKind::Ring => match m {
            1 => vec![],
            2 => vec![(0, 1)],
            _ => (0..m).map(|i| (i, (i + 1) % m)).collect(),
        },
        TopologyKind::Path => (0..m.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
        TopologyKind::Grid => {
            let cols = (m as f64).sqrt().ceil() as usize;
            let mut e = Vec::new();
            for v in 0..m {
                let (r, c) = (v / cols, v % cols);
                if c + 1 < cols && v + 1 < m {
                    e.push((v, v + 1));
                }
                let down = (r + 1) * cols + c;
                if down < m {
                    e.push((v, down));
                }
            }
            e
        }
        TopologyKind::ErdosRenyi { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidSize(format!("edge probability {p} not in (0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut found = None;
            for _ in 0..ER_MAX_RETRIES {
                let mut e = Vec::new();
                for a in 0..m {
                    for b in a + 1..m {
                        if rng.gen::<f64>() < p {
                            e.push((a, b));
                        }
                    }
                }
                let candidate = Topology { m, edges: e, kind, seed };
                if candidate.is_connected() {
                    found = Some(candidate.edges);
                    break;
                }
            }
            found.ok_or(Error::NotConnected { retries: ER_MAX_RETRIES })?
        }
        TopologyKind::Custom => {
            return Err(Error::InvalidSize("custom topologies are built with Topology::from_edges".into()))
        }
    };
    let topo = Topology { m, edges, kind, seed };
    if !topo.is_connected() {
        return Err(Error::NotConnected { retries: 0 });
    }
    Ok(topo)
}

/// Symmetric doubly stochastic gossip matrix with its mixing factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    #[serde(with = "linalg::rows")]
    pub p: Mat,
    pub beta: f64,
}

impl MixingMatrix {
    /// Validate `p` and compute its mixing factor.
    pub fn from_matrix(p: Mat) -> Result<Self> {
        check_doubly_stochastic(&p, STOCHASTIC_TOL)?;
        for i in 0..p.nrows() {
            if p[(i, i)] <= 0.0 {
                return Err(Error::NumericalFailure(format!("diagonal entry {i} is not positive")));
            }
        }
        let beta = mixing_factor(&p)?;
        Ok(MixingMatrix { p, beta })
    }

    pub fn m(&self) -> usize {
        self.p.nrows()
    }

    /// `[P]_{ji}`: weight agent `i` places on agent `j`'s iterate.
    pub fn weight(&self, j: usize, i: usize) -> f64 {
        self.p[(j, i)]
    }
}

/// Check symmetry, non-negativity and unit row/column sums.
pub fn check_doubly_stochastic(p: &Mat, tol: f64) -> Result<()> {
    let m = p.nrows();
    if p.ncols() != m {
        return Err(Error::DimensionMismatch("mixing matrix must be square".into()));
    }
    for i in 0..m {
        let row: f64 = p.row(i).sum();
        let col: f64 = p.column(i).sum();
        if (row - 1.0).abs() > tol || (col - 1.0).abs() > tol {
            return Err(Error::NumericalFailure(format!(
                "row/column {i} sums to {row}/{col}, not 1"
            )));
        }
        for j in 0..m {
            if p[(i, j)] < 0.0 {
                return Err(Error::NumericalFailure(format!("negative weight at ({i},{j})")));
            }
            if (p[(i, j)] - p[(j, i)]).abs() > tol {
                return Err(Error::NumericalFailure(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Metropolis-Hastings weights: `1/(1+max(deg_i, deg_j))` per edge, residual on
/// the diagonal.
pub fn metropolis_weights(g: &Topology) -> Result<MixingMatrix> {
    let m = g.m;
    let deg = g.degrees();
    let mut p = Mat::zeros(m, m);
    for &(a, b) in &g.edges {
        let w = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        p[(a, b)] = w;
        p[(b, a)] = w;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| p[(i, j)]).sum();
        p[(i, i)] = 1.0 - off;
    }
    MixingMatrix::from_matrix(p)
}

/// Second-largest singular value of `p` (0 for a single agent).
pub fn mixing_factor(p: &Mat) -> Result<f64> {
    let s = linalg::singular_values(p)?;
    Ok(s.get(1).copied().unwrap_or(0.0))
}

/// Outcome of checking `sum_j |[P^k]_{ji} - 1/m| <= sqrt(m) beta^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    /// Largest observed lhs/rhs ratio (0 when every lhs is 0).
    pub max_ratio: f64,
    /// `max_i sum_j |[P^k]_{ji} - 1/m|` for `k = 1..=k_max`.
    pub deviation: Vec<f64>,
}

/// Powers whose bound falls below this are checked but left out of
/// [`MixingReport::max_ratio`].
pub const RATIO_FLOOR: f64 = 1e-6;

/// Verify the geometric mixing bound for every power up to `k_max`.
pub fn verify_mixing_bound(mix: &MixingMatrix, k_max: usize) -> Result<MixingReport> {
    let m = mix.m();
    let inv_m = 1.0 / m as f64;
    let sqrt_m = (m as f64).sqrt();
    let mut pk = Mat::identity(m, m);
    let mut max_ratio: f64 = 0.0;
    let mut deviation = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        pk = &pk * &mix.p;
        let rhs = sqrt_m * mix.beta.powi(k as i32);
        let mut worst: f64 = 0.0;
        for i in 0..m {
            let lhs: f64 = (0..m).map(|j| (pk[(j, i)] - inv_m).abs()).sum();
            if lhs > rhs + 1e-12 {
                return Err(Error::BoundViolated { k, i, lhs, rhs });
            }
            // ratios of rounding-level quantities carry no information
            if rhs > RATIO_FLOOR {
                max_ratio = max_ratio.max(lhs / rhs);
            }
            worst = worst.max(lhs);
        }
        deviation.push(worst);
    }
    Ok(MixingReport { max_ratio, deviation })
}
