//! TOML experiment configuration.
//!
//! Numeric knobs with a horizon- or system-dependent default accept either a
//! number or the string `"auto"`. [`ExperimentConfig::resolve`] replaces every
//! `"auto"` that does not depend on the horizon by its value, so the echoed
//! config of a known, unknown or identification run is fully explicit. Sweep
//! runs keep horizon-dependent knobs as `"auto"` and record the per-run
//! values next to each run instead.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dfc::GradientMethod;
use crate::error::{Error, Result};
use crate::known::{self, InitMode, KnownRunConfig, NoiseMode};
use crate::linalg::{self, Mat};
use crate::lti::{mix_seed, CostStream, NoiseKind, NoiseSchedule, SystemParams};
use crate::network::{self, MixingMatrix, Topology, TopologyKind};
use crate::stability;
use crate::sysid;
use crate::unknown::{self, UnknownRunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Known,
    Unknown,
    SysidOnly,
    Sweep,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(Mode::Known),
            "unknown" => Ok(Mode::Unknown),
            "sysid_only" => Ok(Mode::SysidOnly),
            "sweep" => Ok(Mode::Sweep),
            _ => Err(Error::config("mode", format!("unknown mode `{s}`"))),
        }
    }
}

/// A number, or `"auto"` for the documented default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting<T> {
    Value(T),
    Keyword(Keyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keyword {
    Auto,
}

impl<T: Copy> Setting<T> {
    pub const AUTO: Setting<T> = Setting::Keyword(Keyword::Auto);

    pub fn or_else(self, f: impl FnOnce() -> T) -> T {
        match self {
            Setting::Value(v) => v,
            Setting::Keyword(Keyword::Auto) => f(),
        }
    }

    pub fn is_auto(&self) -> bool {
        matches!(self, Setting::Keyword(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Stabilizing gain; a Riccati stabilizer when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyName {
    Complete,
    Ring,
    Path,
    Grid,
    ErdosRenyi,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub topology: TopologyName,
    pub agents: usize,
    /// Edge probability for `erdos_renyi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Edge list for `custom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub amplitude: f64,
    #[serde(default)]
    pub mode: NoiseMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostName {
    Tracking,
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub kind: CostName,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub target_radius: f64,
    pub omega: f64,
    #[serde(default)]
    pub drift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Ignored in sweep mode, which takes its horizons from `[sweep]`.
    pub horizon: usize,
    /// Required: a step size or `"auto"` for `1/sqrt(T)`.
    #[serde(default)]
    pub eta: Option<Setting<f64>>,
    #[serde(default = "auto")]
    pub h: Setting<usize>,
    #[serde(default = "analytic")]
    pub gradient: GradientMethod,
    #[serde(default = "zero_init")]
    pub init: InitName,
    /// Constraint-set radius scale, `2 kappa^3` by default.
    #[serde(default = "auto")]
    pub set_c: Setting<f64>,
    /// Constraint-set decay, the certificate's gamma by default.
    #[serde(default = "auto")]
    pub set_gamma: Setting<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnknownSection {
    #[serde(default)]
    pub t_collect: Option<Setting<usize>>,
    #[serde(default)]
    pub t_exchange: Option<Setting<usize>>,
    #[serde(default)]
    pub q: Option<Setting<usize>>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// Best time-invariant DFC in the constraint set, rolled out on the true noise.
    OfflineDfc,
    /// Best linear policy on an axis grid around the stabilizer.
    LinearGrid,
    Both,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegretSection {
    #[serde(default = "offline_dfc")]
    pub comparator: Comparator,
    #[serde(default = "default_grid_radius")]
    pub grid_radius: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for RegretSection {
    fn default() -> Self {
        RegretSection {
            comparator: Comparator::OfflineDfc,
            grid_radius: default_grid_radius(),
            grid_points: default_grid_points(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub horizons: Vec<usize>,
    #[serde(default = "known_dynamics")]
    pub dynamics: Dynamics,
    /// Regrets below this are raised to it before the log-log fit.
    #[serde(default = "default_floor")]
    pub regret_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Output directory, overridden by `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub system: SystemSection,
    pub network: NetworkSection,
    pub noise: NoiseSection,
    pub costs: CostSection,
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unknown: Option<UnknownSection>,
    #[serde(default)]
    pub regret: RegretSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn auto<T: Copy>() -> Setting<T> {
    Setting::AUTO
}
fn analytic() -> GradientMethod {
    GradientMethod::Analytic
}
fn zero_init() -> InitName {
    InitName::Zero
}
fn default_delta() -> f64 {
    0.05
}
fn offline_dfc() -> Comparator {
    Comparator::OfflineDfc
}
fn default_grid_radius() -> f64 {
    0.3
}
fn default_grid_points() -> usize {
    3
}
fn known_dynamics() -> Dynamics {
    Dynamics::Known
}
fn default_floor() -> f64 {
    1e-6
}
fn one() -> usize {
    1
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<Mat> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::config(field, "matrix must be non-empty"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(field, "entries must be finite"));
    }
    linalg::from_rows(rows).map_err(|e| Error::config(field, e))
}

/// Per-run seeds: repetition `r` uses `seed + r`.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    seed.wrapping_add(rep as u64)
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            // serde names the missing or unexpected key in backticks
            let field = msg.split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Schema checks that need no numerical work.
    pub fn validate(&self) -> Result<()> {
        let eta = self.run.eta.ok_or_else(|| Error::config("run.eta", "required: a step size or \"auto\""))?;
        if let Setting::Value(v) = eta {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config("run.eta", format!("must be positive, got {v}")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be at least 1"));
        }
        if self.network.agents == 0 {
            return Err(Error::config("network.agents", "must be at least 1"));
        }
        if !(self.noise.amplitude >= 0.0 && self.noise.amplitude.is_finite()) {
            return Err(Error::config("noise.amplitude", "must be finite and non-negative"));
        }
        if self.mode != Mode::Sweep && self.run.horizon == 0 {
            return Err(Error::config("run.horizon", "must be at least 1"));
        }
        let needs_unknown = match self.mode {
            Mode::Unknown | Mode::SysidOnly => true,
            Mode::Sweep => self.sweep.as_ref().is_some_and(|s| s.dynamics == Dynamics::Unknown),
            Mode::Known => false,
        };
        if needs_unknown {
            let u = self.unknown.as_ref().ok_or_else(|| Error::config("unknown", "section required in this mode"))?;
            for (name, v) in [("unknown.t_collect", u.t_collect), ("unknown.t_exchange", u.t_exchange), ("unknown.q", u.q)] {
                if v.is_none() {
                    return Err(Error::config(name, "required in this mode (a value or \"auto\")"));
                }
            }
        }
        if self.mode == Mode::Sweep {
            let s = self.sweep.as_ref().ok_or_else(|| Error::config("sweep", "section required in sweep mode"))?;
            if s.horizons.len() < 3 || s.horizons.contains(&0) {
                return Err(Error::config("sweep.horizons", "need at least 3 positive horizons"));
            }
        }
        if self.noise.mode == NoiseMode::Independent && self.regret.comparator != Comparator::None {
            return Err(Error::config(
                "regret.comparator",
                "comparators need a shared disturbance sequence; use \"none\" with independent noise",
            ));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<SystemParams> {
        SystemParams::new(matrix("system.a", &self.system.a)?, matrix("system.b", &self.system.b)?)
            .map_err(|e| Error::config("system", e.to_string()))
    }

    pub fn gain(&self, sys: &SystemParams) -> Result<Mat> {
        match &self.system.k {
            Some(k) => matrix("system.k", k),
            None => stability::synthesize_stabilizer(sys),
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        let n = &self.network;
        let seed = mix_seed(self.seed, 0x746f_706f);
        let kind = match n.topology {
            TopologyName::Complete => TopologyKind::Complete,
            TopologyName::Ring => TopologyKind::Ring,
            TopologyName::Path => TopologyKind::Path,
            TopologyName::Grid => TopologyKind::Grid,
            TopologyName::ErdosRenyi => TopologyKind::ErdosRenyi {
                p: n.p.ok_or_else(|| Error::config("network.p", "required for erdos_renyi"))?,
            },
            TopologyName::Custom => {
                let edges = n.edges.as_ref().ok_or_else(|| Error::config("network.edges", "required for custom"))?;
                return Topology::from_edges(n.agents, edges.iter().map(|e| (e[0], e[1])).collect());
            }
        };
        network::build_topology(kind, n.agents, seed)
    }

    pub fn mixing(&self) -> Result<MixingMatrix> {
        network::metropolis_weights(&self.topology()?)
    }

    pub fn noise_schedule(&self, seed: u64, d1: usize) -> NoiseSchedule {
        NoiseSchedule::new(self.noise.kind, self.noise.amplitude, seed, d1)
    }

    pub fn cost_stream(&self) -> Result<CostStream> {
        let c = &self.costs;
        let (q, r) = (matrix("costs.q", &c.q)?, matrix("costs.r", &c.r)?);
        Ok(match c.kind {
            CostName::Tracking => CostStream::tracking(self.network.agents, q, r, c.target_radius, c.omega),
            CostName::Drift => CostStream::drifting(self.network.agents, q, r, c.target_radius, c.omega, c.drift),
        })
    }

    /// Library config for one known-dynamics run at `horizon` with noise seed `seed`.
    pub fn known_config(&self, horizon: usize, seed: u64) -> Result<KnownRunConfig> {
        let sys = self.system()?;
        let k = self.gain(&sys)?;
        let mixing = self.mixing()?;
        let noise = self.noise_schedule(seed, sys.d1());
        let mut cfg = KnownRunConfig::new(sys, Some(k), mixing, self.cost_stream()?, noise, horizon)?;
        let r = &self.run;
        cfg.eta = r.eta.unwrap_or(Setting::AUTO).or_else(|| known::default_eta(horizon));
        cfg.h = r.h.or_else(|| cfg.h);
        cfg.gradient = r.gradient;
        cfg.noise_mode = self.noise.mode;
        cfg.init = match r.init {
            InitName::Zero => InitMode::Zero,
            InitName::Random => InitMode::Random { seed: mix_seed(seed, 0x696e_6974) },
        };
        cfg.set_c = r.set_c.or_else(|| cfg.set_c);
        cfg.set_gamma = r.set_gamma.or_else(|| cfg.set_gamma);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn unknown_config(&self, horizon: usize, seed: u64) -> Result<UnknownRunConfig> {
        let mut cfg = UnknownRunConfig::new(self.known_config(horizon, seed)?)?;
        let u = self.unknown.as_ref().ok_or_else(|| Error::config("unknown", "section required in this mode"))?;
        cfg.t_collect = u.t_collect.unwrap_or(Setting::AUTO).or_else(|| cfg.t_collect);
        cfg.t_exchange = u.t_exchange.unwrap_or(Setting::AUTO).or_else(|| cfg.t_exchange);
        cfg.q = u.q.unwrap_or(Setting::AUTO).or_else(|| cfg.q);
        cfg.delta = u.delta;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Materializes every default that does not depend on the horizon, and
    /// in non-sweep modes the horizon-dependent ones as well.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        self.validate()?;
        let mut out = self.clone();
        let sys = self.system()?;
        let k = self.gain(&sys)?;
        out.system.k = Some(linalg::to_rows(&k));
        if self.mode == Mode::Sweep {
            let base = out.known_config(self.sweep.as_ref().map_or(1, |s| s.horizons[0]), self.seed)?;
            out.run.set_c = Setting::Value(base.set_c);
            out.run.set_gamma = Setting::Value(base.set_gamma);
            if let Some(u) = out.unknown.as_mut() {
                if u.q.is_some_and(|q| q.is_auto()) {
                    let q = stability::controllability_index(&sys.a, &sys.b)
                        .ok_or_else(|| Error::config("unknown.q", "pair is not controllable"))?;
                    u.q = Some(Setting::Value(q));
                }
            }
            return Ok(out);
        }
        let base = out.known_config(self.run.horizon, self.seed)?;
        out.run.eta = Some(Setting::Value(base.eta));
        out.run.h = Setting::Value(base.h);
        out.run.set_c = Setting::Value(base.set_c);
        out.run.set_gamma = Setting::Value(base.set_gamma);
        if matches!(self.mode, Mode::Unknown | Mode::SysidOnly) {
            let ucfg = out.unknown_config_unchecked(self.run.horizon, &base)?;
            let u = out.unknown.as_mut().expect("validated");
            u.t_collect = Some(Setting::Value(ucfg.t_collect));
            u.t_exchange = Some(Setting::Value(ucfg.t_exchange));
            u.q = Some(Setting::Value(ucfg.q));
        }
        Ok(out)
    }

    /// Identification-only runs may leave no learning rounds, so skip the
    /// `T_0 < T` check there.
    pub(crate) fn unknown_config_unchecked(&self, horizon: usize, base: &KnownRunConfig) -> Result<UnknownRunConfig> {
        let u = self.unknown.as_ref().ok_or_else(|| Error::config("unknown", "section required in this mode"))?;
        let q_default = stability::controllability_index(&base.sys.a, &base.sys.b)
            .ok_or_else(|| Error::config("unknown.q", "pair is not controllable"))?;
        Ok(UnknownRunConfig {
            t_collect: u.t_collect.unwrap_or(Setting::AUTO).or_else(|| unknown::default_t_collect(horizon)),
            t_exchange: u
                .t_exchange
                .unwrap_or(Setting::AUTO)
                .or_else(|| sysid::default_t_exchange(horizon, base.mixing.beta)),
            q: u.q.unwrap_or(Setting::AUTO).or_else(|| q_default),
            delta: u.delta,
            probe_seed: mix_seed(base.noise.seed, 0x7072_6f62),
            oracle: false,
            base: base.clone(),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
mode = "known"
seed = 7

[system]
a = [[0.5, 0.1], [0.1, 0.3]]
b = [[1.0, 0.0], [0.0, 1.0]]
k = [[0.0, 0.0], [0.0, 0.0]]

[network]
topology = "ring"
agents = 3

[noise]
kind = "sinusoid"
amplitude = 1.0

[costs]
kind = "drift"
q = [[0.25, 0.0], [0.0, 0.25]]
r = [[0.0625, 0.0], [0.0, 0.0625]]
target_radius = 0.1
omega = 0.05
drift = 0.3

[run]
horizon = 50
eta = "auto"
"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.run.h, Setting::AUTO);
        let r = cfg.resolve().unwrap();
        assert_eq!(r.run.eta, Some(Setting::Value(1.0 / 50f64.sqrt())));
        assert!(matches!(r.run.h, Setting::Value(h) if h >= 1));
        // resolving twice changes nothing
        assert_eq!(r.resolve().unwrap(), r);
        let back = ExperimentConfig::from_toml_str(&r.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn missing_eta_names_the_field() {
        let text = MINIMAL.replace("eta = \"auto\"\n", "");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { field, .. }) => assert!(field.contains("eta"), "{field}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_keyword_and_unknown_key_are_config_errors() {
        let text = MINIMAL.replace("eta = \"auto\"", "eta = \"fast\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config { .. })));
        let text = MINIMAL.replace("agents = 3", "agents = 3\ncolour = 1");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "colour"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_mode_requires_identification_knobs() {
        let text = MINIMAL.replace("mode = \"known\"", "mode = \"unknown\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config { field, .. }) if field == "unknown"));
        let text = format!("{text}\n[unknown]\nt_collect = 20\nq = \"auto\"\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::Config { field, .. }) if field == "unknown.t_exchange"
        ));
    }

    #[test]
    fn independent_noise_needs_no_comparator() {
        let text = MINIMAL.replace("amplitude = 1.0", "amplitude = 1.0\nmode = \"independent\"");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = format!("{text}\n[regret]\ncomparator = \"none\"\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_ok());
    }
}
