//! Experiment configuration files (TOML).
//!
//! Parsing is two-pass: the text is read into a generic table, every key is
//! checked against the known layout, and then each field is decoded on its
//! own so that all problems are reported together.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use toml::{Table, Value};

use crate::diagnostics::ChaosFunctional;
use crate::drift::VelocityKernel;
use crate::geometry::Domain;
use crate::simulator::{InitialLaw, SimConfig, SimError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub field: String,
    pub constraint: String,
}

impl ValidationIssue {
    fn new(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Self { field: field.into(), constraint: constraint.into() }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid configuration:\n{}", format_issues(.0))]
    Validation(Vec<ValidationIssue>),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n")
}

/// Overrides for [`SimConfig`] fields; unset fields keep the experiment's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimulationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<VelocityKernel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialLaw>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_reflections_per_step: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_events: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<f64>>,
}

impl SimulationSection {
    pub fn apply(&self, cfg: &mut SimConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        set!(n_particles, domain, epsilon, dt, horizon, sigma, kernel, initial, max_reflections_per_step, record_events, checkpoints);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceSection {
    pub delta: f64,
    pub variance_tol: f64,
    pub radial_tol: f64,
}

impl Default for InvarianceSection {
    fn default() -> Self {
        Self { delta: 0.05, variance_tol: 0.05, radial_tol: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HitRateSection {
    pub seeds: u32,
    pub z_max: f64,
}

impl Default for HitRateSection {
    fn default() -> Self {
        Self { seeds: 20, z_max: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoPermeabilitySection {
    pub deltas: Vec<f64>,
}

impl Default for NoPermeabilitySection {
    fn default() -> Self {
        Self { deltas: vec![0.02, 0.05, 0.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassageSection {
    pub y: f64,
    pub v: f64,
    pub horizon: f64,
    pub beta_star: f64,
    pub n_max: u32,
    pub paths: usize,
    pub dt: f64,
}

impl Default for PassageSection {
    fn default() -> Self {
        Self { y: 1.0, v: 0.0, horizon: 1.0, beta_star: 1.0, n_max: 6, paths: 100_000, dt: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosSection {
    pub sizes: Vec<usize>,
    pub seeds: u32,
    pub functional: ChaosFunctional,
}

impl Default for ChaosSection {
    fn default() -> Self {
        Self { sizes: vec![500, 2000, 8000], seeds: 20, functional: ChaosFunctional::TanhFirstVelocity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonSection {
    pub epsilons: Vec<f64>,
    pub epsilon_ref: f64,
    pub seeds: u32,
    pub nodes_x: usize,
    pub nodes_u: usize,
}

impl Default for EpsilonSection {
    fn default() -> Self {
        Self { epsilons: vec![0.4, 0.2, 0.1], epsilon_ref: 0.05, seeds: 20, nodes_x: 200, nodes_u: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftSection {
    pub sizes: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub seeds: u32,
    pub velocity_mean: Vec<f64>,
    pub velocity_std: f64,
    pub kernel: VelocityKernel,
    pub queries: Vec<Vec<f64>>,
}

impl Default for DriftSection {
    fn default() -> Self {
        let mut queries = Vec::new();
        for i in -1..=1 {
            for j in -1..=1 {
                queries.push(vec![0.15 * i as f64, 0.15 * j as f64]);
            }
        }
        Self {
            sizes: vec![1_000, 10_000, 100_000],
            epsilons: vec![0.4, 0.25, 0.15],
            seeds: 20,
            velocity_mean: vec![1.0, 1.0],
            velocity_std: 1.0,
            kernel: VelocityKernel::NegTanh,
            queries,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output location and thread count do not change results, so they are not echoed.
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub workers: Option<usize>,
    pub simulation: SimulationSection,
    pub invariance: InvarianceSection,
    pub hit_rate: HitRateSection,
    pub no_permeability: NoPermeabilitySection,
    pub passage: PassageSection,
    pub chaos: ChaosSection,
    pub epsilon_study: EpsilonSection,
    pub drift_consistency: DriftSection,
}

impl ExperimentConfig {
    /// `base` with the `[simulation]` overrides and the top-level seed/workers applied, then validated.
    pub fn sim_config(&self, mut base: SimConfig) -> Result<SimConfig, ConfigError> {
        self.simulation.apply(&mut base);
        if let Some(s) = self.seed {
            base.seed = s;
        }
        if let Some(w) = self.workers {
            base.workers = w;
        }
        match base.validate() {
            Ok(()) => Ok(base),
            Err(SimError::InvalidConfig(issues)) => Err(ConfigError::Validation(
                issues
                    .iter()
                    .map(|s| match s.split_once(": ") {
                        Some((f, c)) => ValidationIssue::new(format!("simulation.{f}"), c),
                        None => ValidationIssue::new("simulation", s.clone()),
                    })
                    .collect(),
            )),
            Err(e) => Err(ConfigError::Validation(vec![ValidationIssue::new("simulation", e.to_string())])),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Expected layout of the file: `None` marks a leaf, `Some` a nested table.
struct Layout(&'static [(&'static str, Option<&'static Layout>)]);

const DOMAIN: Layout = Layout(&[("kind", None), ("dim", None), ("radius", None), ("center", None), ("length", None)]);
const KERNEL: Layout = Layout(&[("preset", None), ("c", None)]);
const POSITION: Layout = Layout(&[("law", None), ("at", None)]);
const VELOCITY: Layout = Layout(&[("law", None), ("at", None), ("mean", None), ("std", None)]);
const INITIAL: Layout = Layout(&[("position", Some(&POSITION)), ("velocity", Some(&VELOCITY)), ("margin", None)]);
const SIMULATION: Layout = Layout(&[
    ("n_particles", None),
    ("domain", Some(&DOMAIN)),
    ("epsilon", None),
    ("dt", None),
    ("horizon", None),
    ("sigma", None),
    ("kernel", Some(&KERNEL)),
    ("initial", Some(&INITIAL)),
    ("max_reflections_per_step", None),
    ("record_events", None),
    ("checkpoints", None),
]);
const INVARIANCE: Layout = Layout(&[("delta", None), ("variance_tol", None), ("radial_tol", None)]);
const HIT_RATE: Layout = Layout(&[("seeds", None), ("z_max", None)]);
const NO_PERMEABILITY: Layout = Layout(&[("deltas", None)]);
const PASSAGE: Layout = Layout(&[
    ("y", None),
    ("v", None),
    ("horizon", None),
    ("beta_star", None),
    ("n_max", None),
    ("paths", None),
    ("dt", None),
]);
const CHAOS: Layout = Layout(&[("sizes", None), ("seeds", None), ("functional", None)]);
const EPSILON: Layout = Layout(&[("epsilons", None), ("epsilon_ref", None), ("seeds", None), ("nodes_x", None), ("nodes_u", None)]);
const DRIFT: Layout = Layout(&[
    ("sizes", None),
    ("epsilons", None),
    ("seeds", None),
    ("velocity_mean", None),
    ("velocity_std", None),
    ("kernel", Some(&KERNEL)),
    ("queries", None),
]);
const ROOT: Layout = Layout(&[
    ("seed", None),
    ("out", None),
    ("workers", None),
    ("simulation", Some(&SIMULATION)),
    ("invariance", Some(&INVARIANCE)),
    ("hit_rate", Some(&HIT_RATE)),
    ("no_permeability", Some(&NO_PERMEABILITY)),
    ("passage", Some(&PASSAGE)),
    ("chaos", Some(&CHAOS)),
    ("epsilon_study", Some(&EPSILON)),
    ("drift_consistency", Some(&DRIFT)),
]);

fn check_layout(table: &Table, layout: &Layout, prefix: &str, issues: &mut Vec<ValidationIssue>) {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match layout.0.iter().find(|(k, _)| k == key) {
            None => {
                let best = layout
                    .0
                    .iter()
                    .map(|(k, _)| (strsim::jaro_winkler(key, k), *k))
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                let hint = match best {
                    Some((score, k)) if score >= 0.8 => format!("unknown key; did you mean `{k}`?"),
                    _ => "unknown key".to_string(),
                };
                issues.push(ValidationIssue::new(path, hint));
            }
            Some((_, Some(inner))) => match value {
                Value::Table(t) => check_layout(t, inner, &path, issues),
                _ => issues.push(ValidationIssue::new(path, "must be a table")),
            },
            Some((_, None)) => {}
        }
    }
}

struct Reader<'a> {
    issues: &'a mut Vec<ValidationIssue>,
}

impl Reader<'_> {
    fn get<T: DeserializeOwned>(&mut self, table: Option<&Table>, section: &str, key: &str) -> Option<T> {
        let value = table?.get(key)?;
        let field = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        match value.clone().try_into::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                self.issues.push(ValidationIssue::new(field, e.message().trim().to_string()));
                None
            }
        }
    }

    fn check(&mut self, ok: bool, field: &str, constraint: &str) {
        if !ok {
            self.issues.push(ValidationIssue::new(field, constraint));
        }
    }
}

fn section<'a>(root: &'a Table, name: &str) -> Option<&'a Table> {
    root.get(name).and_then(Value::as_table)
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
        ConfigError::Parse { line, column, message: e.message().trim().to_string() }
    })?;

    let mut issues = Vec::new();
    check_layout(&root, &ROOT, "", &mut issues);
    let mut r = Reader { issues: &mut issues };
    let mut cfg = ExperimentConfig {
        seed: r.get(Some(&root), "", "seed"),
        out: r.get(Some(&root), "", "out"),
        workers: r.get(Some(&root), "", "workers"),
        ..Default::default()
    };

    let s = section(&root, "simulation");
    let sim = &mut cfg.simulation;
    sim.n_particles = r.get(s, "simulation", "n_particles");
    sim.domain = r.get(s, "simulation", "domain");
    sim.epsilon = r.get(s, "simulation", "epsilon");
    sim.dt = r.get(s, "simulation", "dt");
    sim.horizon = r.get(s, "simulation", "horizon");
    sim.sigma = r.get(s, "simulation", "sigma");
    sim.kernel = r.get(s, "simulation", "kernel");
    sim.initial = r.get(s, "simulation", "initial");
    sim.max_reflections_per_step = r.get(s, "simulation", "max_reflections_per_step");
    sim.record_events = r.get(s, "simulation", "record_events");
    sim.checkpoints = r.get(s, "simulation", "checkpoints");
    if let Some(n) = sim.n_particles {
        r.check(n >= 1, "simulation.n_particles", "≥ 1");
    }
    if let Some(v) = sim.dt {
        r.check(v > 0.0 && v.is_finite(), "simulation.dt", "> 0");
    }
    if let Some(v) = sim.epsilon {
        r.check(v > 0.0 && v.is_finite(), "simulation.epsilon", "> 0");
    }
    if let Some(v) = sim.horizon {
        r.check(v > 0.0 && v.is_finite(), "simulation.horizon", "> 0");
        if let Some(dt) = sim.dt.filter(|dt| *dt > 0.0) {
            r.check(v >= dt, "simulation.horizon", "≥ dt");
        }
    }
    if let Some(v) = sim.sigma {
        r.check(v >= 0.0 && v.is_finite(), "simulation.sigma", "≥ 0");
    }
    if let Some(v) = sim.max_reflections_per_step {
        r.check(v >= 1, "simulation.max_reflections_per_step", "≥ 1");
    }

    let s = section(&root, "invariance");
    let inv = &mut cfg.invariance;
    if let Some(v) = r.get(s, "invariance", "delta") {
        inv.delta = v;
    }
    if let Some(v) = r.get(s, "invariance", "variance_tol") {
        inv.variance_tol = v;
    }
    if let Some(v) = r.get(s, "invariance", "radial_tol") {
        inv.radial_tol = v;
    }
    r.check(inv.delta > 0.0, "invariance.delta", "> 0");
    r.check(inv.variance_tol > 0.0, "invariance.variance_tol", "> 0");
    r.check(inv.radial_tol > 0.0, "invariance.radial_tol", "> 0");

    let s = section(&root, "hit_rate");
    if let Some(v) = r.get(s, "hit_rate", "seeds") {
        cfg.hit_rate.seeds = v;
    }
    if let Some(v) = r.get(s, "hit_rate", "z_max") {
        cfg.hit_rate.z_max = v;
    }
    r.check(cfg.hit_rate.seeds >= 1, "hit_rate.seeds", "≥ 1");
    r.check(cfg.hit_rate.z_max > 0.0, "hit_rate.z_max", "> 0");

    let s = section(&root, "no_permeability");
    if let Some(v) = r.get(s, "no_permeability", "deltas") {
        cfg.no_permeability.deltas = v;
    }
    r.check(
        !cfg.no_permeability.deltas.is_empty() && cfg.no_permeability.deltas.iter().all(|d| *d > 0.0),
        "no_permeability.deltas",
        "nonempty, every entry > 0",
    );

    let s = section(&root, "passage");
    let p = &mut cfg.passage;
    macro_rules! read {
        ($dst:expr, $sec:ident, $name:literal, $($field:ident),*) => {$(
            if let Some(v) = r.get($sec, $name, stringify!($field)) {
                $dst.$field = v;
            }
        )*};
    }
    read!(p, s, "passage", y, v, horizon, beta_star, n_max, paths, dt);
    r.check(p.y > 0.0, "passage.y", "> 0");
    r.check(p.horizon > 0.0, "passage.horizon", "> 0");
    r.check(p.beta_star > 0.0 && p.beta_star <= p.y, "passage.beta_star", "in (0, y]");
    r.check(p.n_max >= 3, "passage.n_max", "≥ 3");
    r.check(p.paths >= 1, "passage.paths", "≥ 1");
    r.check(p.dt > 0.0 && p.dt <= p.horizon, "passage.dt", "in (0, horizon]");

    let s = section(&root, "chaos");
    let c = &mut cfg.chaos;
    read!(c, s, "chaos", sizes, seeds);
    if let Some(name) = r.get::<String>(s, "chaos", "functional") {
        match name.as_str() {
            "tanh_first_velocity" => c.functional = ChaosFunctional::TanhFirstVelocity,
            "clamped_jumps" => c.functional = ChaosFunctional::ClampedJumps,
            _ => r.check(false, "chaos.functional", "one of tanh_first_velocity, clamped_jumps"),
        }
    }
    r.check(!c.sizes.is_empty() && c.sizes.iter().all(|n| *n >= 4), "chaos.sizes", "nonempty, every entry ≥ 4");
    r.check(c.seeds >= 1, "chaos.seeds", "≥ 1");

    let s = section(&root, "epsilon_study");
    let e = &mut cfg.epsilon_study;
    read!(e, s, "epsilon_study", epsilons, epsilon_ref, seeds, nodes_x, nodes_u);
    r.check(
        !e.epsilons.is_empty() && e.epsilons.windows(2).all(|w| w[1] < w[0]) && e.epsilons.iter().all(|x| *x > 0.0),
        "epsilon_study.epsilons",
        "nonempty, positive, strictly decreasing",
    );
    r.check(e.epsilon_ref > 0.0, "epsilon_study.epsilon_ref", "> 0");
    r.check(e.seeds >= 1, "epsilon_study.seeds", "≥ 1");
    r.check(e.nodes_x >= 2 && e.nodes_u >= 2, "epsilon_study.nodes_x", "nodes_x, nodes_u ≥ 2");

    let s = section(&root, "drift_consistency");
    let d = &mut cfg.drift_consistency;
    read!(d, s, "drift_consistency", sizes, epsilons, seeds, velocity_mean, velocity_std, kernel, queries);
    r.check(d.sizes.len() == d.epsilons.len() && !d.sizes.is_empty(), "drift_consistency.epsilons", "same length as sizes");
    r.check(d.epsilons.iter().all(|x| *x > 0.0), "drift_consistency.epsilons", "every entry > 0");
    r.check(d.seeds >= 1, "drift_consistency.seeds", "≥ 1");
    r.check(d.velocity_std > 0.0, "drift_consistency.velocity_std", "> 0");
    r.check(!d.queries.is_empty(), "drift_consistency.queries", "nonempty");

    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Validation(issues))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn issues(text: &str) -> Vec<ValidationIssue> {
        match parse_config_str(text) {
            Err(ConfigError::Validation(v)) => v,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_echoes_defaults() {
        let cfg = parse_config_str("[simulation]\ndomain = { kind = \"ball\", radius = 1.0, dim = 2 }\n").unwrap();
        assert_eq!(cfg.simulation.domain, Some(Domain::unit_ball(2)));
        assert_eq!(cfg.invariance, InvarianceSection::default());
        assert_eq!(cfg.passage.n_max, 6);
        assert!(serde_json::to_string(&cfg).unwrap().contains("\"passage\""));
    }

    #[test]
    fn zero_dt_is_rejected() {
        let v = issues("[simulation]\ndt = 0\n");
        assert!(v.contains(&ValidationIssue::new("simulation.dt", "> 0")), "{v:?}");
    }

    #[test]
    fn unknown_key_gets_suggestion() {
        let v = issues("[simulation]\nepsilonn = 0.2\n");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "simulation.epsilonn");
        assert!(v[0].constraint.contains("`epsilon`"));
    }

    #[test]
    fn all_errors_are_collected() {
        let v = issues("sede = 3\n[simulation]\ndt = -1\nsigma = \"x\"\n[passage]\nn_max = 2\n");
        let fields: Vec<&str> = v.iter().map(|i| i.field.as_str()).collect();
        for f in ["sede", "simulation.dt", "simulation.sigma", "passage.n_max"] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
    }

    #[test]
    fn nested_keys_are_checked() {
        let v = issues("[simulation]\ndomain = { kind = \"ball\", radius = 1.0, dimm = 2 }\n");
        assert!(v.iter().any(|i| i.field == "simulation.domain.dimm" && i.constraint.contains("`dim`")));
    }

    #[test]
    fn parse_errors_carry_position() {
        match parse_config_str("seed = 1\n[simulation\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn simulation_overrides_apply() {
        let cfg = parse_config_str(
            "seed = 9\n[simulation]\nn_particles = 7\nkernel = { preset = \"neg_tanh\" }\n\
             domain = { kind = \"interval\", length = 2.0 }\n\
             initial = { position = { law = \"uniform\" }, velocity = { law = \"gaussian\", mean = [0.0], std = 1.0 } }\n",
        )
        .unwrap();
        let sim = cfg.sim_config(SimConfig::new(Domain::unit_ball(2), 100, InitialLaw::uniform_gaussian(2, 1.0))).unwrap();
        assert_eq!((sim.n_particles, sim.seed, sim.kernel), (7, 9, VelocityKernel::NegTanh));
        assert_eq!(sim.domain, Domain::interval(2.0).unwrap());

        let bad = parse_config_str("[simulation]\ndomain = { kind = \"interval\", length = 2.0 }\n").unwrap();
        let err = bad.sim_config(SimConfig::new(Domain::unit_ball(2), 10, InitialLaw::uniform_gaussian(2, 1.0)));
        assert!(matches!(err, Err(ConfigError::Validation(v)) if v.iter().any(|i| i.field == "simulation.initial.velocity.mean")));
    }
}
