//! N-particle system with mollified mean-field drift and specular reflection.
//!
//! Each step is a Lie splitting:
//!
//! * Phase A: the drift of every particle is evaluated from one frozen
//!   snapshot of all particles, then `u ← u + B_ε·dt + σ√dt·ξ`.
//! * Phase B: ballistic transport over `dt` with exact reflections,
//!   `u ← u − 2(u·n)n` at every boundary contact, accumulated into `k`.
//!
//! Every particle owns a ChaCha stream selected by `(seed, particle id)`, so a
//! run is bit-identical for any number of worker threads.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{BinnedDrift, EmpiricalSnapshot, Mollifier, VelocityKernel};
use crate::geometry::{dot, specular_reflect, Domain, GeometryError, Vector};

pub const DEFAULT_MAX_REFLECTIONS: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("particle {particle} exceeded the reflection cap within one step at t = {time}; reduce dt")]
    ReflectionCapExceeded { particle: usize, time: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("run was recorded without increments; enable record_events")]
    MissingIncrements,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum PositionLaw {
    /// Uniform on `{x : signed_distance(x) ≥ margin}`.
    Uniform,
    Point { at: Vector },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityLaw {
    /// `N(mean, std² I)`.
    Gaussian { mean: Vector, std: f64 },
    Point { at: Vector },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub position: PositionLaw,
    pub velocity: VelocityLaw,
    /// Distance β* kept between the initial support and ∂D.
    #[serde(default)]
    pub margin: f64,
}

impl InitialLaw {
    pub fn uniform_gaussian(dim: usize, std: f64) -> Self {
        Self {
            position: PositionLaw::Uniform,
            velocity: VelocityLaw::Gaussian { mean: Vector::from_elem(0.0, dim), std },
            margin: 0.0,
        }
    }

    pub fn point(x: &[f64], u: &[f64]) -> Self {
        Self {
            position: PositionLaw::Point { at: x.iter().copied().collect() },
            velocity: VelocityLaw::Point { at: u.iter().copied().collect() },
            margin: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_particles: usize,
    pub domain: Domain,
    pub epsilon: f64,
    pub dt: f64,
    pub horizon: f64,
    pub sigma: f64,
    pub kernel: VelocityKernel,
    pub initial: InitialLaw,
    pub seed: u64,
    pub max_reflections_per_step: u32,
    pub record_events: bool,
    /// Times at which particle snapshots are kept (rounded down to step boundaries).
    pub checkpoints: Vec<f64>,
    /// Worker threads; 0 uses the ambient rayon pool. Not serialized: results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
}

impl SimConfig {
    pub fn new(domain: Domain, n_particles: usize, initial: InitialLaw) -> Self {
        Self {
            n_particles,
            domain,
            epsilon: 0.1,
            dt: 1e-3,
            horizon: 1.0,
            sigma: 1.0,
            kernel: VelocityKernel::Zero,
            initial,
            seed: 0,
            max_reflections_per_step: DEFAULT_MAX_REFLECTIONS,
            record_events: false,
            checkpoints: Vec::new(),
            workers: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn n_steps(&self) -> u64 {
        (self.horizon / self.dt - 1e-9).ceil().max(0.0) as u64
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<(), SimError> {
        let mut issues = Vec::new();
        let d = self.dim();
        if self.n_particles == 0 {
            issues.push("n_particles: must be ≥ 1".to_string());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            issues.push("dt: must be > 0".to_string());
        }
        if !(self.horizon >= self.dt) {
            issues.push("horizon: must be ≥ dt".to_string());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            issues.push("sigma: must be ≥ 0".to_string());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            issues.push("epsilon: must be > 0".to_string());
        }
        if self.max_reflections_per_step == 0 {
            issues.push("max_reflections_per_step: must be ≥ 1".to_string());
        }
        if let VelocityKernel::ClippedLinear { c } = self.kernel {
            if !(c > 0.0 && c.is_finite()) {
                issues.push("kernel.c: must be > 0".to_string());
            }
        }
        let margin = self.initial.margin;
        if !(margin >= 0.0) {
            issues.push("initial.margin: must be ≥ 0".to_string());
        } else if margin >= self.domain.inradius() {
            issues.push(format!("initial.margin: must be < inradius {}", self.domain.inradius()));
        }
        match &self.initial.position {
            PositionLaw::Uniform => {
                if !self.domain.is_compact() {
                    issues.push("initial.position: uniform law needs a bounded domain".to_string());
                }
            }
            PositionLaw::Point { at } => {
                if at.len() != d {
                    issues.push(format!("initial.position.at: expected {d} coordinates"));
                } else if self.domain.signed_distance(at) < margin.max(0.0) {
                    issues.push("initial.position.at: must lie at distance ≥ margin inside the domain".to_string());
                }
            }
        }
        match &self.initial.velocity {
            VelocityLaw::Gaussian { mean, std } => {
                if mean.len() != d {
                    issues.push(format!("initial.velocity.mean: expected {d} coordinates"));
                }
                if !(*std >= 0.0 && std.is_finite()) {
                    issues.push("initial.velocity.std: must be ≥ 0".to_string());
                }
            }
            VelocityLaw::Point { at } => {
                if at.len() != d {
                    issues.push(format!("initial.velocity.at: expected {d} coordinates"));
                }
            }
        }
        for &t in &self.checkpoints {
            if !(t >= 0.0 && t <= self.horizon) {
                issues.push(format!("checkpoints: {t} outside [0, horizon]"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(issues))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub x: Vector,
    pub u: Vector,
    /// Accumulated reflection jumps `Σ −2(u⁻·n)n`.
    pub k: Vector,
    pub jumps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    pub t: f64,
    pub id: usize,
    pub hit: Vector,
    pub u_minus: Vector,
    pub u_plus: Vector,
}

/// Per-particle running sums of the drift and noise contributions to `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementTotals {
    pub drift: Vector,
    pub noise: Vector,
}

#[derive(Debug, Clone)]
pub struct SystemState {
    pub step: u64,
    pub particles: Vec<ParticleState>,
    rngs: Vec<ChaCha8Rng>,
    increments: Option<Vec<IncrementTotals>>,
}

fn particle_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

fn draw_particle(law: &InitialLaw, dom: &Domain, rng: &mut ChaCha8Rng) -> Result<ParticleState, GeometryError> {
    let d = dom.dim();
    let x = match &law.position {
        PositionLaw::Uniform => dom.sample_uniform(law.margin, rng)?,
        PositionLaw::Point { at } => at.clone(),
    };
    let u = match &law.velocity {
        VelocityLaw::Gaussian { mean, std } => mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + std * z
            })
            .collect(),
        VelocityLaw::Point { at } => at.clone(),
    };
    Ok(ParticleState { x, u, k: Vector::from_elem(0.0, d), jumps: 0 })
}

/// `n` i.i.d. draws from the initial law; particle `i` uses stream `(seed, i)`.
pub fn sample_initial(law: &InitialLaw, dom: &Domain, n: usize, seed: u64) -> Result<Vec<ParticleState>, SimError> {
    if law.margin >= dom.inradius() {
        return Err(GeometryError::InfeasibleMargin { margin: law.margin, inradius: dom.inradius() }.into());
    }
    (0..n)
        .map(|i| Ok(draw_particle(law, dom, &mut particle_rng(seed, i))?))
        .collect()
}

impl SystemState {
    /// Draws the initial particles; their RNG streams continue into the dynamics.
    pub fn initialize(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut particles = Vec::with_capacity(cfg.n_particles);
        let mut rngs = Vec::with_capacity(cfg.n_particles);
        for i in 0..cfg.n_particles {
            let mut rng = particle_rng(cfg.seed, i);
            particles.push(draw_particle(&cfg.initial, &cfg.domain, &mut rng)?);
            rngs.push(rng);
        }
        Ok(Self::from_particles(particles, rngs, cfg.record_events))
    }

    /// Starts from explicit particle states; stream `i` of `seed` drives particle `i`.
    pub fn from_states(particles: Vec<ParticleState>, seed: u64, track_increments: bool) -> Self {
        let rngs = (0..particles.len()).map(|i| particle_rng(seed, i)).collect();
        Self::from_particles(particles, rngs, track_increments)
    }

    fn from_particles(particles: Vec<ParticleState>, rngs: Vec<ChaCha8Rng>, track: bool) -> Self {
        let increments = track.then(|| {
            particles
                .iter()
                .map(|p| IncrementTotals {
                    drift: Vector::from_elem(0.0, p.x.len()),
                    noise: Vector::from_elem(0.0, p.x.len()),
                })
                .collect()
        });
        Self { step: 0, particles, rngs, increments }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn time(&self, dt: f64) -> f64 {
        self.step as f64 * dt
    }

    pub fn increments(&self) -> Option<&[IncrementTotals]> {
        self.increments.as_deref()
    }

    pub fn snapshot(&self) -> EmpiricalSnapshot {
        let d = self.particles.first().map_or(1, |p| p.x.len());
        EmpiricalSnapshot::from_pairs(d, self.particles.iter().map(|p| (p.x.as_slice(), p.u.as_slice())))
    }

    /// Mollified drift at every particle position, from the current snapshot.
    pub fn drifts(&self, cfg: &SimConfig) -> Vec<Vector> {
        let d = cfg.dim();
        if cfg.kernel.is_zero() {
            return vec![Vector::from_elem(0.0, d); self.len()];
        }
        let snap = self.snapshot();
        let mol = Mollifier::new(cfg.epsilon, d);
        let field = BinnedDrift::new(&snap, &mol, &cfg.kernel, &cfg.domain);
        self.particles.par_iter().map(|p| field.eval(&p.x)).collect()
    }

    /// Advances by one step of `cfg.dt`. Boundary events are appended in
    /// particle-id order.
    pub fn step(&mut self, cfg: &SimConfig, events: &mut Vec<BoundaryEvent>) -> Result<(), SimError> {
        let t0 = self.time(cfg.dt);
        let drifts = self.drifts(cfg);
        let dt = cfg.dt;
        let noise_scale = cfg.sigma * dt.sqrt();
        let dom = &cfg.domain;
        let cap = cfg.max_reflections_per_step;
        let record = cfg.record_events;

        let per_particle: Vec<Result<Vec<BoundaryEvent>, SimError>> = match self.increments.as_mut() {
            Some(incs) => self
                .particles
                .par_iter_mut()
                .zip(self.rngs.par_iter_mut())
                .zip(drifts.par_iter())
                .zip(incs.par_iter_mut())
                .enumerate()
                .map(|(id, (((p, rng), b), inc))| {
                    kick(p, rng, b, dt, noise_scale, Some(inc));
                    transport(p, id, dom, dt, t0, cap, record)
                })
                .collect(),
            None => self
                .particles
                .par_iter_mut()
                .zip(self.rngs.par_iter_mut())
                .zip(drifts.par_iter())
                .enumerate()
                .map(|(id, ((p, rng), b))| {
                    kick(p, rng, b, dt, noise_scale, None);
                    transport(p, id, dom, dt, t0, cap, record)
                })
                .collect(),
        };
        self.step += 1;
        for r in per_particle {
            events.extend(r?);
        }
        Ok(())
    }
}

fn kick(
    p: &mut ParticleState,
    rng: &mut ChaCha8Rng,
    drift: &Vector,
    dt: f64,
    noise_scale: f64,
    inc: Option<&mut IncrementTotals>,
) {
    let d = p.u.len();
    let mut noise = Vector::with_capacity(d);
    for _ in 0..d {
        let z: f64 = StandardNormal.sample(rng);
        noise.push(noise_scale * z);
    }
    for j in 0..d {
        let db = drift[j] * dt;
        p.u[j] = p.u[j] + db + noise[j];
    }
    if let Some(inc) = inc {
        for j in 0..d {
            inc.drift[j] += drift[j] * dt;
            inc.noise[j] += noise[j];
        }
    }
}

fn transport(
    p: &mut ParticleState,
    id: usize,
    dom: &Domain,
    dt: f64,
    t0: f64,
    cap: u32,
    record: bool,
) -> Result<Vec<BoundaryEvent>, SimError> {
    let mut events = Vec::new();
    let mut remaining = dt;
    let mut contacts = 0u32;
    loop {
        match dom.first_exit_time(&p.x, &p.u, remaining)? {
            None => {
                for (x, u) in p.x.iter_mut().zip(&p.u) {
                    *x += remaining * u;
                }
                return Ok(events);
            }
            Some(exit) => {
                contacts += 1;
                if contacts > cap {
                    return Err(SimError::ReflectionCapExceeded { particle: id, time: t0 + dt - remaining });
                }
                remaining -= exit.time;
                let n = dom.outward_normal(&exit.hit)?;
                p.x = exit.hit;
                let un = dot(&p.u, &n);
                if un <= 0.0 {
                    // Grazing contact: keep transporting.
                    continue;
                }
                let u_plus = specular_reflect(&p.u, &n);
                for (k, n) in p.k.iter_mut().zip(&n) {
                    *k -= 2.0 * un * n;
                }
                p.jumps += 1;
                if record {
                    events.push(BoundaryEvent {
                        t: t0 + dt - remaining,
                        id,
                        hit: p.x.clone(),
                        u_minus: p.u.clone(),
                        u_plus: u_plus.clone(),
                    });
                }
                p.u = u_plus;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub time: f64,
    pub step: u64,
    pub particles: Vec<ParticleState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: SimConfig,
    pub initial: Vec<ParticleState>,
    pub final_particles: Vec<ParticleState>,
    pub steps: u64,
    pub events: Vec<BoundaryEvent>,
    pub checkpoints: Vec<Checkpoint>,
    /// Present when the run was configured with `record_events`.
    pub increments: Option<Vec<IncrementTotals>>,
}

impl RunRecord {
    pub fn final_time(&self) -> f64 {
        self.steps as f64 * self.config.dt
    }

    /// Number of particles with at least `n` reflections, for `n = 0..=max`.
    pub fn jump_histogram(&self) -> Vec<usize> {
        let max = self.final_particles.iter().map(|p| p.jumps).max().unwrap_or(0) as usize;
        let mut h = vec![0usize; max + 1];
        for p in &self.final_particles {
            h[p.jumps as usize] += 1;
        }
        h
    }
}

/// Runs `⌈T/dt⌉` steps from a fresh draw of the initial law.
pub fn run(cfg: &SimConfig) -> Result<RunRecord, SimError> {
    cfg.validate()?;
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("failed to build worker pool");
        pool.install(|| run_inner(cfg))
    } else {
        run_inner(cfg)
    }
}

fn run_inner(cfg: &SimConfig) -> Result<RunRecord, SimError> {
    let mut state = SystemState::initialize(cfg)?;
    let initial = state.particles.clone();
    let n_steps = cfg.n_steps();
    let mut wanted: Vec<u64> = cfg
        .checkpoints
        .iter()
        .map(|t| ((t / cfg.dt) + 1e-9).floor() as u64)
        .map(|s| s.min(n_steps))
        .collect();
    wanted.sort_unstable();
    wanted.dedup();

    let mut checkpoints = Vec::with_capacity(wanted.len());
    let mut next = wanted.iter().peekable();
    let mut events = Vec::new();
    loop {
        while let Some(&&s) = next.peek() {
            if s != state.step {
                break;
            }
            checkpoints.push(Checkpoint { time: state.time(cfg.dt), step: s, particles: state.particles.clone() });
            next.next();
        }
        if state.step >= n_steps {
            break;
        }
        state.step(cfg, &mut events)?;
    }
    Ok(RunRecord {
        config: cfg.clone(),
        initial,
        final_particles: state.particles,
        steps: n_steps,
        events,
        checkpoints,
        increments: state.increments,
    })
}

/// Runs and reports the elapsed wall time alongside the record.
pub fn run_timed(cfg: &SimConfig) -> Result<(RunRecord, f64), SimError> {
    let start = Instant::now();
    let record = run(cfg)?;
    Ok((record, start.elapsed().as_secs_f64()))
}

/// `max_i |u_i(T) − u_i(0) − Σ B_ε dt − σ Σ √dt ξ − k_i(T)|`.
pub fn pathwise_identity_check(record: &RunRecord) -> Result<f64, SimError> {
    let incs = record.increments.as_ref().ok_or(SimError::MissingIncrements)?;
    let mut worst = 0.0f64;
    for ((p0, p1), inc) in record.initial.iter().zip(&record.final_particles).zip(incs) {
        for j in 0..p0.u.len() {
            let r = p1.u[j] - p0.u[j] - inc.drift[j] - inc.noise[j] - p1.k[j];
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Rebuilds every particle's `k` from the event log.
pub fn reconstruct_jumps(record: &RunRecord) -> Vec<Vector> {
    let d = record.config.dim();
    let mut k = vec![Vector::from_elem(0.0, d); record.final_particles.len()];
    for e in &record.events {
        let n = record.config.domain.normal_at_nearest(&e.hit);
        let un = dot(&e.u_minus, &n);
        for (k, n) in k[e.id].iter_mut().zip(&n) {
            *k -= 2.0 * un * n;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use smallvec::smallvec;

    fn billiard_cfg(x: &[f64], u: &[f64], dt: f64, horizon: f64) -> SimConfig {
        let mut cfg = SimConfig::new(Domain::unit_ball(2), 1, InitialLaw::point(x, u));
        cfg.sigma = 0.0;
        cfg.dt = dt;
        cfg.horizon = horizon;
        cfg.record_events = true;
        cfg
    }

    #[test]
    fn deterministic_billiard_step() {
        let cfg = billiard_cfg(&[0.0, 0.0], &[2.0, 0.0], 1.0, 1.0);
        let rec = run(&cfg).unwrap();
        let p = &rec.final_particles[0];
        assert_eq!(p.x.as_slice(), &[0.0, 0.0]);
        assert_eq!(p.u.as_slice(), &[-2.0, 0.0]);
        assert_eq!(p.k.as_slice(), &[-4.0, 0.0]);
        assert_eq!(p.jumps, 1);
        assert_eq!(rec.events.len(), 1);
        let e = &rec.events[0];
        assert_eq!(e.t, 0.5);
        assert_eq!(e.hit.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn interior_transport_without_events() {
        let cfg = billiard_cfg(&[0.1, 0.0], &[0.3, 0.1], 0.5, 0.5);
        let rec = run(&cfg).unwrap();
        assert!(rec.events.is_empty());
        let p = &rec.final_particles[0];
        assert!((p.x[0] - 0.25).abs() < 1e-15 && (p.x[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn lone_particle_at_rest_stays_at_rest() {
        let mut cfg = billiard_cfg(&[0.2, 0.1], &[0.0, 0.0], 0.1, 1.0);
        cfg.kernel = VelocityKernel::NegTanh;
        let rec = run(&cfg).unwrap();
        assert_eq!(rec.final_particles[0].u.as_slice(), &[0.0, 0.0]);
        assert_eq!(rec.final_particles[0].x.as_slice(), &[0.2, 0.1]);
    }

    #[test]
    fn immobile_system() {
        let mut cfg = SimConfig::new(
            Domain::unit_ball(2),
            50,
            InitialLaw {
                position: PositionLaw::Uniform,
                velocity: VelocityLaw::Point { at: smallvec![0.0, 0.0] },
                margin: 0.0,
            },
        );
        cfg.sigma = 0.0;
        cfg.dt = 0.05;
        let rec = run(&cfg).unwrap();
        assert_eq!(rec.initial, rec.final_particles);
        assert!(rec.final_particles.iter().all(|p| p.k.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn reflection_cap_is_enforced() {
        // Speed 100 across a unit ball in dt = 1 needs ~50 reflections.
        let mut cfg = billiard_cfg(&[0.0, 0.0], &[100.0, 0.0], 1.0, 1.0);
        cfg.max_reflections_per_step = 8;
        assert!(matches!(run(&cfg), Err(SimError::ReflectionCapExceeded { particle: 0, .. })));
    }

    #[test]
    fn half_space_and_interval_reflections() {
        let mut cfg = SimConfig::new(Domain::half_space(2).unwrap(), 1, InitialLaw::point(&[0.5, 0.0], &[-1.0, 2.0]));
        cfg.sigma = 0.0;
        cfg.dt = 1.0;
        cfg.horizon = 1.0;
        let rec = run(&cfg).unwrap();
        let p = &rec.final_particles[0];
        assert_eq!(p.x.as_slice(), &[0.5, 2.0]);
        assert_eq!(p.u.as_slice(), &[1.0, 2.0]);
        assert_eq!(p.k.as_slice(), &[2.0, 0.0]);

        let mut cfg = SimConfig::new(Domain::interval(1.0).unwrap(), 1, InitialLaw::point(&[0.5], &[3.0]));
        cfg.sigma = 0.0;
        cfg.dt = 1.0;
        cfg.horizon = 1.0;
        let rec = run(&cfg).unwrap();
        let p = &rec.final_particles[0];
        // 0.5 → 1 → 0 → 0.5 (moving right again after two reflections)
        assert_eq!(p.jumps, 3);
        assert!((p.x[0] - 0.0).abs() < 1e-15 || (p.x[0] - 1.0).abs() < 1e-15 || p.x[0] > 0.0);
        assert!((p.x[0] - 0.0).abs() < 1e-12 || p.u[0] == -3.0);
    }

    #[test]
    fn initial_sampling_examples() {
        let ball = Domain::unit_ball(2);
        let law = InitialLaw { margin: 0.5, ..InitialLaw::uniform_gaussian(2, 1.0) };
        let ps = sample_initial(&law, &ball, 10_000, 7).unwrap();
        let n = ps.len() as f64;
        assert!(ps.iter().all(|p| ball.signed_distance(&p.x) >= 0.5));
        for j in 0..2 {
            let mean: f64 = ps.iter().map(|p| p.x[j]).sum::<f64>() / n;
            assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        }

        let pm = sample_initial(&InitialLaw::point(&[0.1, 0.2], &[1.0, -1.0]), &ball, 5, 1).unwrap();
        assert!(pm.windows(2).all(|w| w[0] == w[1]));

        let bad = InitialLaw { margin: 1.5, ..InitialLaw::uniform_gaussian(2, 1.0) };
        assert!(matches!(
            sample_initial(&bad, &ball, 5, 1),
            Err(SimError::Geometry(GeometryError::InfeasibleMargin { .. }))
        ));
    }

    #[test]
    fn gaussian_velocity_variance() {
        let ball = Domain::unit_ball(2);
        let n = 100_000;
        let ps = sample_initial(&InitialLaw::uniform_gaussian(2, 1.0), &ball, n, 99).unwrap();
        let nf = n as f64;
        let tol = 3.0 * (2.0 / nf).sqrt();
        for j in 0..2 {
            let mean: f64 = ps.iter().map(|p| p.u[j]).sum::<f64>() / nf;
            let var: f64 = ps.iter().map(|p| (p.u[j] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            assert!((var - 1.0).abs() < tol, "var {var}");
        }
    }

    #[test]
    fn same_seed_same_record() {
        let mut cfg = SimConfig::new(Domain::unit_ball(2), 200, InitialLaw::uniform_gaussian(2, 1.0));
        cfg.kernel = VelocityKernel::NegTanh;
        cfg.dt = 0.01;
        cfg.horizon = 0.2;
        cfg.record_events = true;
        cfg.checkpoints = vec![0.0, 0.1];
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(a.checkpoints[0].particles, a.initial);
        cfg.seed = 1;
        assert_ne!(run(&cfg).unwrap().final_particles, a.final_particles);
    }

    #[test]
    fn pathwise_identity_holds() {
        let mut cfg = SimConfig::new(Domain::unit_ball(2), 100, InitialLaw::uniform_gaussian(2, 1.0));
        cfg.kernel = VelocityKernel::NegTanh;
        cfg.epsilon = 0.3;
        cfg.dt = 0.01;
        cfg.horizon = 0.5;
        cfg.record_events = true;
        let rec = run(&cfg).unwrap();
        assert!(!rec.events.is_empty());
        assert!(pathwise_identity_check(&rec).unwrap() < 1e-10);
        let k = reconstruct_jumps(&rec);
        for (p, k) in rec.final_particles.iter().zip(&k) {
            assert_eq!(&p.k, k);
        }

        cfg.record_events = false;
        let rec = run(&cfg).unwrap();
        assert_eq!(pathwise_identity_check(&rec), Err(SimError::MissingIncrements));
    }

    #[test]
    fn validation_collects_all_issues() {
        let mut cfg = SimConfig::new(Domain::unit_ball(2), 0, InitialLaw::uniform_gaussian(2, 1.0));
        cfg.dt = 0.0;
        cfg.epsilon = -1.0;
        match cfg.validate() {
            Err(SimError::InvalidConfig(issues)) => {
                assert!(issues.len() >= 3, "{issues:?}");
                assert!(issues.iter().any(|s| s.starts_with("dt")));
            }
            other => panic!("{other:?}"),
        }
    }
}
