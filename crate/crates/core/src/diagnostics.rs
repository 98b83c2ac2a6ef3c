//! Post-processing of run records: sample metrics, wall statistics, density
//! estimates and the trend studies built on them.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::drift::{binned_smoothed_drift, exact_drift, Mollifier, PhaseDensity, VelocityDensity, VelocityKernel};
use crate::geometry::{dot, norm, Domain, Vector};
use crate::simulator::{reconstruct_jumps, run, sample_initial, InitialLaw, ParticleState, PositionLaw, RunRecord, SimConfig, SimError, VelocityLaw};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("sample must contain at least two points")]
    EmptySample,
    #[error("samples have different widths ({0} vs {1})")]
    WidthMismatch(usize, usize),
    #[error("run is outside the calibrated regime: {0}")]
    WrongRegime(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

/// `ω(u) = (1 + |u|²)^{α/2}` with `α > d + 3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightFunction {
    alpha: f64,
    dim: usize,
}

impl WeightFunction {
    pub fn new(alpha: f64, dim: usize) -> Result<Self, DiagnosticsError> {
        if !(alpha > dim as f64 + 3.0) {
            return Err(DiagnosticsError::InvalidParameter(format!("weight exponent must exceed d + 3 = {}, got {alpha}", dim + 3)));
        }
        Ok(Self { alpha, dim })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        (1.0 + dot(u, u)).powf(0.5 * self.alpha)
    }
}

/// Rows of equal width stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    width: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(width: usize, data: Vec<f64>) -> Self {
        assert!(width > 0 && data.len().is_multiple_of(width), "data length must be a multiple of the width");
        Self { width, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let width = rows.first().map_or(1, |r| r.as_ref().len());
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(width, data)
    }

    /// Phase-space points `(x, u)`.
    pub fn phase(particles: &[ParticleState]) -> Self {
        let width = particles.first().map_or(2, |p| p.x.len() + p.u.len());
        let data = particles.iter().flat_map(|p| p.x.iter().chain(&p.u).copied()).collect();
        Self::new(width, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    fn column_std(&self, j: usize) -> f64 {
        let n = self.len() as f64;
        let mean = self.rows().map(|r| r[j]).sum::<f64>() / n;
        (self.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    }
}

/// `n` directions uniform on the unit sphere of `ℝ^width`.
pub fn random_directions(width: usize, n: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vector = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
            let r = norm(&v);
            if r > 1e-12 {
                break v.iter().map(|c| c / r).collect();
            }
        })
        .collect()
}

/// Exact `W₁` between two empirical measures on the line, from sorted samples.
///
/// Integrates `|F_a⁻¹(t) − F_b⁻¹(t)|` over the merged quantile breakpoints.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    let (mut i, mut j) = (0, 0);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - t) * (a[i] - b[j]).abs();
        t = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Sliced `W₁` over a fixed set of unit directions.
pub fn sliced_w1_with(a: &PointCloud, b: &PointCloud, directions: &[Vector]) -> Result<f64, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    if a.width() != b.width() {
        return Err(DiagnosticsError::WidthMismatch(a.width(), b.width()));
    }
    let project = |c: &PointCloud, theta: &[f64]| {
        let mut p: Vec<f64> = c.rows().map(|r| dot(r, theta)).collect();
        p.sort_unstable_by(f64::total_cmp);
        p
    };
    let total: f64 = directions
        .iter()
        .map(|theta| w1_sorted(&project(a, theta), &project(b, theta)))
        .sum();
    Ok(total / directions.len() as f64)
}

/// Sliced `W₁` averaged over `n_proj` random directions drawn from `seed`.
pub fn sliced_w1(a: &PointCloud, b: &PointCloud, n_proj: usize, seed: u64) -> Result<f64, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    sliced_w1_with(a, b, &random_directions(a.width(), n_proj.max(1), seed))
}

/// Mean normal velocity over a boundary shell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShellEstimate {
    pub delta: f64,
    pub count: usize,
    /// `None` when the shell is empty.
    pub estimate: Option<f64>,
    /// `None` with fewer than two particles in the shell.
    pub std_error: Option<f64>,
}

impl ShellEstimate {
    /// `|estimate| ≤ k · SE`; false when undefined.
    pub fn within(&self, k: f64) -> bool {
        match (self.estimate, self.std_error) {
            (Some(e), Some(s)) => e.abs() <= k * s,
            _ => false,
        }
    }
}

/// Average of `u · n(π(x))` over particles with `signed_distance(x) < δ`.
pub fn mean_no_permeability(particles: &[ParticleState], dom: &Domain, delta: f64) -> ShellEstimate {
    let values: Vec<f64> = particles
        .iter()
        .filter(|p| dom.signed_distance(&p.x) < delta)
        .map(|p| dot(&p.u, &dom.normal_at_nearest(&p.x)))
        .collect();
    let count = values.len();
    if count == 0 {
        return ShellEstimate { delta, count, estimate: None, std_error: None };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let std_error = (count > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
        (var / count as f64).sqrt()
    });
    ShellEstimate { delta, count, estimate: Some(mean), std_error }
}

/// Expected wall hits per particle on `[0, T]` for the free flow in a ball of
/// radius `R` started uniform × `N(0, s₀² I)`:
/// `(d/R)(1/√(2π)) ∫₀^T √(s₀² + σ²s) ds`.
pub fn predicted_hits_per_particle(dim: usize, radius: f64, sigma: f64, s0: f64, horizon: f64) -> f64 {
    let pre = dim as f64 / radius / (2.0 * PI).sqrt();
    if horizon <= 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return pre * s0 * horizon;
    }
    let s2 = sigma * sigma;
    pre * 2.0 / (3.0 * s2) * ((s0 * s0 + s2 * horizon).powf(1.5) - s0.powi(3))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitRate {
    pub particles: usize,
    pub hits: u64,
    pub empirical: f64,
    pub predicted: f64,
    pub std_error: f64,
    pub z: f64,
}

/// Wall hits per particle against [`predicted_hits_per_particle`].
pub fn boundary_hit_rate(record: &RunRecord) -> Result<HitRate, DiagnosticsError> {
    let cfg = &record.config;
    if !cfg.kernel.is_zero() {
        return Err(DiagnosticsError::WrongRegime("drift kernel must be zero".into()));
    }
    let radius = match &cfg.domain {
        Domain::Ball { radius, .. } => *radius,
        _ => return Err(DiagnosticsError::WrongRegime("domain must be a ball".into())),
    };
    if cfg.initial.position != PositionLaw::Uniform || cfg.initial.margin != 0.0 {
        return Err(DiagnosticsError::WrongRegime("positions must start uniform on the whole ball".into()));
    }
    let s0 = match &cfg.initial.velocity {
        VelocityLaw::Gaussian { mean, std } if mean.iter().all(|m| *m == 0.0) => *std,
        VelocityLaw::Point { at } if at.iter().all(|m| *m == 0.0) => 0.0,
        _ => return Err(DiagnosticsError::WrongRegime("velocities must start centred Gaussian".into())),
    };
    let n = record.final_particles.len();
    let predicted = predicted_hits_per_particle(cfg.dim(), radius, cfg.sigma, s0, record.final_time());
    let jumps: Vec<f64> = record.final_particles.iter().map(|p| p.jumps as f64).collect();
    let hits = record.final_particles.iter().map(|p| p.jumps as u64).sum();
    let empirical = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let var = if n > 1 { jumps.iter().map(|j| (j - empirical).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let std_error = (var / n.max(1) as f64).sqrt();
    let z = if std_error > 0.0 {
        (empirical - predicted) / std_error
    } else if empirical == predicted {
        0.0
    } else {
        f64::INFINITY.copysign(empirical - predicted)
    };
    Ok(HitRate { particles: n, hits, empirical, predicted, std_error, z })
}

/// Worst violations of the reflection rules over an event log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReflectionReport {
    pub events: usize,
    /// `max ||u⁺| − |u⁻||`.
    pub max_speed_change: f64,
    /// `max |u⁺·n + u⁻·n|`.
    pub max_normal_defect: f64,
    /// `max |k_i − k_i(rebuilt from events)|`, componentwise.
    pub max_jump_mismatch: f64,
}

pub fn reflection_invariants(record: &RunRecord) -> ReflectionReport {
    let dom = &record.config.domain;
    let mut speed = 0.0f64;
    let mut normal = 0.0f64;
    for e in &record.events {
        let n = dom.normal_at_nearest(&e.hit);
        speed = speed.max((norm(&e.u_plus) - norm(&e.u_minus)).abs());
        normal = normal.max((dot(&e.u_plus, &n) + dot(&e.u_minus, &n)).abs());
    }
    let rebuilt = reconstruct_jumps(record);
    let mismatch = record
        .final_particles
        .iter()
        .zip(&rebuilt)
        .flat_map(|(p, k)| p.k.iter().zip(k).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    ReflectionReport { events: record.events.len(), max_speed_change: speed, max_normal_defect: normal, max_jump_mismatch: mismatch }
}

/// Sample variance of each velocity coordinate.
pub fn velocity_variances(particles: &[ParticleState]) -> Vec<f64> {
    let d = particles.first().map_or(0, |p| p.u.len());
    let n = particles.len() as f64;
    (0..d)
        .map(|j| {
            let mean = particles.iter().map(|p| p.u[j]).sum::<f64>() / n;
            particles.iter().map(|p| (p.u[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

/// Kolmogorov distance between the empirical law of `|x − c|/R` and the
/// uniform-ball radial law `r^d`.
pub fn radial_cdf_deviation(particles: &[ParticleState], dom: &Domain) -> Result<f64, DiagnosticsError> {
    let (center, radius) = match dom {
        Domain::Ball { center, radius } => (center, *radius),
        _ => return Err(DiagnosticsError::WrongRegime("radial law needs a ball".into())),
    };
    if particles.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    let d = dom.dim() as i32;
    let mut r: Vec<f64> = particles
        .iter()
        .map(|p| p.x.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt() / radius)
        .collect();
    r.sort_unstable_by(f64::total_cmp);
    let n = r.len() as f64;
    Ok(r.iter()
        .enumerate()
        .map(|(i, &ri)| {
            let f = ri.min(1.0).powi(d);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub expected_variance: f64,
    pub variances: Vec<f64>,
    pub radial_deviation: f64,
    pub shell: ShellEstimate,
}

/// Invariance statistics of the free flow from uniform × centred Gaussian.
pub fn invariance_report(record: &RunRecord, delta: f64) -> Result<InvarianceReport, DiagnosticsError> {
    let cfg = &record.config;
    let s0 = match &cfg.initial.velocity {
        VelocityLaw::Gaussian { std, .. } => *std,
        _ => return Err(DiagnosticsError::WrongRegime("velocities must start Gaussian".into())),
    };
    Ok(InvarianceReport {
        expected_variance: s0 * s0 + cfg.sigma * cfg.sigma * record.final_time(),
        variances: velocity_variances(&record.final_particles),
        radial_deviation: radial_cdf_deviation(&record.final_particles, &cfg.domain)?,
        shell: mean_no_permeability(&record.final_particles, &cfg.domain, delta),
    })
}

/// Product-Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct Kde {
    points: PointCloud,
    bandwidth: Vec<f64>,
}

impl Kde {
    pub fn new(points: PointCloud, bandwidth: Vec<f64>) -> Result<Self, DiagnosticsError> {
        if points.is_empty() {
            return Err(DiagnosticsError::EmptySample);
        }
        if bandwidth.len() != points.width() || bandwidth.iter().any(|h| !(*h > 0.0)) {
            return Err(DiagnosticsError::InvalidParameter("one positive bandwidth per coordinate required".into()));
        }
        Ok(Self { points, bandwidth })
    }

    /// Same bandwidth on every coordinate.
    pub fn isotropic(points: PointCloud, h: f64) -> Result<Self, DiagnosticsError> {
        let w = points.width();
        Self::new(points, vec![h; w])
    }

    pub fn silverman(points: PointCloud) -> Result<Self, DiagnosticsError> {
        let h = silverman_bandwidth(&points)?;
        Self::new(points, h)
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        let norm: f64 = self.bandwidth.iter().map(|h| (2.0 * PI).sqrt() * h).product();
        let s: f64 = self
            .points
            .rows()
            .map(|r| {
                let e: f64 = r.iter().zip(q).zip(&self.bandwidth).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
                (-0.5 * e).exp()
            })
            .sum();
        s / (norm * self.points.len() as f64)
    }

    /// Values at every node of `grid`, truncating each kernel at 6 bandwidths.
    pub fn on_grid(&self, grid: &Grid) -> Vec<f64> {
        let w = self.points.width();
        assert_eq!(grid.width(), w, "grid width must match the sample");
        let total = grid.len();
        let mut out = vec![0.0; total];
        let norm: f64 = self.bandwidth.iter().map(|h| (2.0 * PI).sqrt() * h).product::<f64>() * self.points.len() as f64;
        let mut ranges: Vec<(usize, Vec<f64>)> = vec![(0, Vec::new()); w];
        let strides = grid.strides();
        for r in self.points.rows() {
            let mut empty = false;
            for j in 0..w {
                let (lo, weights) = &mut ranges[j];
                let h = self.bandwidth[j];
                let (first, last) = grid.index_range(j, r[j] - 6.0 * h, r[j] + 6.0 * h);
                weights.clear();
                *lo = first;
                for i in first..last {
                    let z = (grid.coord(j, i) - r[j]) / h;
                    weights.push((-0.5 * z * z).exp());
                }
                empty |= weights.is_empty();
            }
            if empty {
                continue;
            }
            // Odometer over the box of affected nodes.
            let mut idx = vec![0usize; w];
            loop {
                let mut flat = 0;
                let mut v = 1.0 / norm;
                for j in 0..w {
                    flat += (ranges[j].0 + idx[j]) * strides[j];
                    v *= ranges[j].1[idx[j]];
                }
                out[flat] += v;
                let mut j = w;
                loop {
                    if j == 0 {
                        break;
                    }
                    j -= 1;
                    idx[j] += 1;
                    if idx[j] < ranges[j].1.len() {
                        break;
                    }
                    idx[j] = 0;
                    if j == 0 {
                        j = usize::MAX;
                        break;
                    }
                }
                if j == usize::MAX {
                    break;
                }
            }
        }
        out
    }
}

/// Silverman's rule per coordinate: `h_j = s_j (4 / ((w + 2) n))^{1/(w+4)}`.
pub fn silverman_bandwidth(points: &PointCloud) -> Result<Vec<f64>, DiagnosticsError> {
    if points.len() < 2 {
        return Err(DiagnosticsError::EmptySample);
    }
    let w = points.width() as f64;
    let factor = (4.0 / ((w + 2.0) * points.len() as f64)).powf(1.0 / (w + 4.0));
    Ok((0..points.width()).map(|j| (points.column_std(j) * factor).max(1e-12)).collect())
}

/// Maximum number of nodes a density grid may have.
pub const MAX_GRID_NODES: usize = 1_000_000;

/// Cell-centred tensor grid; node `i` along axis `j` sits at `lo_j + (i + ½)Δ_j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize>) -> Result<Self, DiagnosticsError> {
        if lo.len() != hi.len() || lo.len() != counts.len() || lo.is_empty() {
            return Err(DiagnosticsError::InvalidParameter("grid bounds and counts must have equal, nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(b > a)) || counts.contains(&0) {
            return Err(DiagnosticsError::InvalidParameter("grid needs hi > lo and positive counts".into()));
        }
        let total = counts.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c));
        match total {
            Some(t) if t <= MAX_GRID_NODES => Ok(Self { lo, hi, counts }),
            _ => Err(DiagnosticsError::InvalidParameter(format!("grid exceeds {MAX_GRID_NODES} nodes"))),
        }
    }

    /// `D × [−v, v]^d` with `nodes_x` nodes per position axis and `nodes_u` per velocity axis.
    pub fn phase(dom: &Domain, velocity_half_width: f64, nodes_x: usize, nodes_u: usize) -> Result<Self, DiagnosticsError> {
        let d = dom.dim();
        let (xlo, xhi): (Vec<f64>, Vec<f64>) = match dom {
            Domain::Ball { center, radius } => (center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect()),
            Domain::Interval { length } => (vec![0.0], vec![*length]),
            Domain::HalfSpace { .. } => return Err(DiagnosticsError::WrongRegime("density grids need a bounded domain".into())),
        };
        let mut lo = xlo;
        let mut hi = xhi;
        lo.extend(std::iter::repeat_n(-velocity_half_width, d));
        hi.extend(std::iter::repeat_n(velocity_half_width, d));
        let mut counts = vec![nodes_x; d];
        counts.extend(std::iter::repeat_n(nodes_u, d));
        Self::new(lo, hi, counts)
    }

    pub fn width(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, j: usize) -> f64 {
        (self.hi[j] - self.lo[j]) / self.counts[j] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.width()).map(|j| self.spacing(j)).product()
    }

    pub fn coord(&self, j: usize, i: usize) -> f64 {
        self.lo[j] + (i as f64 + 0.5) * self.spacing(j)
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.width()];
        for j in (0..self.width().saturating_sub(1)).rev() {
            s[j] = s[j + 1] * self.counts[j + 1];
        }
        s
    }

    /// Node indices along axis `j` with coordinate in `[a, b]`, as a half-open range.
    fn index_range(&self, j: usize, a: f64, b: f64) -> (usize, usize) {
        let dx = self.spacing(j);
        let first = ((a - self.lo[j]) / dx - 0.5).ceil().max(0.0) as usize;
        let last = (((b - self.lo[j]) / dx - 0.5).floor() + 1.0).clamp(0.0, self.counts[j] as f64) as usize;
        (first.min(last), last)
    }

    /// Coordinates of node `flat`.
    pub fn node(&self, mut flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        for j in (0..self.width()).rev() {
            out[j] = self.coord(j, flat % self.counts[j]);
            flat /= self.counts[j];
        }
        out
    }
}

/// `Σ |f − g| ΔV` over grid nodes whose position part lies in `dom`
/// (mass outside the grid box is not counted).
pub fn l1_distance(grid: &Grid, dom: &Domain, f: &[f64], g: &[f64]) -> f64 {
    let d = dom.dim();
    let s: f64 = f
        .iter()
        .zip(g)
        .enumerate()
        .filter(|(i, _)| dom.signed_distance(&grid.node(*i)[..d]) >= 0.0)
        .map(|(_, (a, b))| (a - b).abs())
        .sum();
    s * grid.cell_volume()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonRow {
    pub seed: u64,
    pub epsilon: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonStudy {
    pub epsilon_ref: f64,
    pub epsilons: Vec<f64>,
    pub rows: Vec<EpsilonRow>,
    pub medians: Vec<f64>,
}

impl EpsilonStudy {
    pub fn non_increasing(&self) -> bool {
        self.medians.windows(2).all(|w| w[1] <= w[0])
    }
}

/// For each seed, runs `base` at `ε_ref` and at every `ε` in `epsilons`
/// (same seed, so the initial draw and noise are shared) and reports the `L¹`
/// distance between final phase-space KDEs. Both KDEs use the Silverman
/// bandwidth of the reference sample.
pub fn epsilon_convergence_study(
    base: &SimConfig,
    epsilons: &[f64],
    epsilon_ref: f64,
    seeds: &[u64],
    nodes_x: usize,
    nodes_u: usize,
) -> Result<EpsilonStudy, DiagnosticsError> {
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(DiagnosticsError::InvalidParameter("ε grid must be strictly decreasing".into()));
    }
    let per_seed: Result<Vec<Vec<EpsilonRow>>, DiagnosticsError> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.epsilon = epsilon_ref;
            let reference = PointCloud::phase(&run(&cfg)?.final_particles);
            let bandwidth = silverman_bandwidth(&reference)?;
            let half = 5.0 * (cfg.dim()..reference.width()).map(|j| reference.column_std(j)).fold(0.0, f64::max);
            let grid = Grid::phase(&cfg.domain, half, nodes_x, nodes_u)?;
            let f_ref = Kde::new(reference, bandwidth.clone())?.on_grid(&grid);
            epsilons
                .iter()
                .map(|&eps| {
                    let distance = if eps == epsilon_ref {
                        0.0
                    } else {
                        let mut c = cfg.clone();
                        c.epsilon = eps;
                        let sample = PointCloud::phase(&run(&c)?.final_particles);
                        let f = Kde::new(sample, bandwidth.clone())?.on_grid(&grid);
                        l1_distance(&grid, &cfg.domain, &f, &f_ref)
                    };
                    Ok(EpsilonRow { seed, epsilon: eps, distance })
                })
                .collect()
        })
        .collect();
    let rows: Vec<EpsilonRow> = per_seed?.into_iter().flatten().collect();
    let medians = epsilons
        .iter()
        .map(|&e| median(rows.iter().filter(|r| r.epsilon == e).map(|r| r.distance).collect()))
        .collect();
    Ok(EpsilonStudy { epsilon_ref, epsilons: epsilons.to_vec(), rows, medians })
}

/// Median of a nonempty list (mean of the middle pair for even length).
pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_unstable_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub bins_used: usize,
    pub bins_skipped: usize,
    /// Least-squares fit `log p = c + ν log q`; `a = c / t` when `t > 0`.
    pub fitted_intercept: Option<f64>,
    pub fitted_nu: Option<f64>,
    pub fitted_a: Option<f64>,
    pub upper_holds: bool,
    pub lower_holds: bool,
    /// Largest excess of an observed count over the upper envelope, in Poisson standard errors.
    pub worst_upper_excess: f64,
}

/// Envelope parameters `(a, ν)` for `e^{at} q^ν` with `q = N(0, s₀² + σ²t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeParams {
    pub s0: f64,
    pub sigma: f64,
    pub time: f64,
    pub upper: (f64, f64),
    pub lower: (f64, f64),
}

/// Minimum bin count for a bin to enter the envelope check.
pub const ENVELOPE_MIN_COUNT: usize = 50;

/// Compares a histogram of one velocity coordinate with Gaussian-power
/// envelopes. Monitoring only: the true envelope constants are not known.
pub fn maxwellian_envelope_check(samples: &[f64], params: &EnvelopeParams) -> EnvelopeReport {
    let var = params.s0 * params.s0 + params.sigma * params.sigma * params.time;
    let s = var.sqrt().max(1e-300);
    let q = |v: f64| (-0.5 * v * v / var).exp() / (2.0 * PI * var).sqrt();
    let bins = 100;
    let (lo, hi) = (-5.0 * s, 5.0 * s);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in samples {
        if v >= lo && v < hi {
            counts[((v - lo) / width) as usize] += 1;
        }
    }
    let n = samples.len() as f64;
    let envelope = |(a, nu): (f64, f64), v: f64| n * width * (a * params.time).exp() * q(v).powf(nu);
    let mut used = Vec::new();
    let mut upper_holds = true;
    let mut lower_holds = true;
    let mut worst = f64::NEG_INFINITY;
    for (i, &c) in counts.iter().enumerate() {
        if c < ENVELOPE_MIN_COUNT {
            continue;
        }
        let v = lo + (i as f64 + 0.5) * width;
        let up = envelope(params.upper, v);
        let excess = (c as f64 - up) / up.max(1.0).sqrt();
        worst = worst.max(excess);
        upper_holds &= excess <= 3.0;
        let down = envelope(params.lower, v);
        lower_holds &= c as f64 >= down - 3.0 * down.max(1.0).sqrt();
        used.push((q(v).ln(), (c as f64 / (n * width)).ln()));
    }
    let (fitted_intercept, fitted_nu) = if used.len() >= 2 {
        let m = used.len() as f64;
        let mx = used.iter().map(|p| p.0).sum::<f64>() / m;
        let my = used.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let nu = sxy / sxx;
        (Some(my - nu * mx), Some(nu))
    } else {
        (None, None)
    };
    EnvelopeReport {
        bins_used: used.len(),
        bins_skipped: bins - used.len(),
        fitted_intercept,
        fitted_nu,
        fitted_a: fitted_intercept.filter(|_| params.time > 0.0).map(|c| c / params.time),
        upper_holds,
        lower_holds,
        worst_upper_excess: if used.is_empty() { 0.0 } else { worst },
    }
}

/// Bounded per-particle statistics used to probe pair correlations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ChaosFunctional {
    /// `tanh(u₁(T))`.
    TanhFirstVelocity,
    /// `min(jumps, 5)`.
    ClampedJumps,
    Constant { value: f64 },
}

impl ChaosFunctional {
    pub fn eval(&self, p: &ParticleState) -> f64 {
        match self {
            ChaosFunctional::TanhFirstVelocity => p.u[0].tanh(),
            ChaosFunctional::ClampedJumps => p.jumps.min(5) as f64,
            ChaosFunctional::Constant { value } => *value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairCovariance {
    pub pairs: usize,
    pub cov: f64,
    pub std_error: f64,
}

/// Covariance of `f` over the disjoint pairs `(0,1), (2,3), …`.
pub fn chaoticity_probe(particles: &[ParticleState], f: &ChaosFunctional) -> Result<PairCovariance, DiagnosticsError> {
    let pairs = particles.len() / 2;
    if pairs < 2 {
        return Err(DiagnosticsError::EmptySample);
    }
    let vals: Vec<f64> = particles[..2 * pairs].iter().map(|p| f.eval(p)).collect();
    // Shift by the first value so a constant functional gives exactly zero.
    let shift = vals[0];
    let mean = shift + vals.iter().map(|v| v - shift).sum::<f64>() / vals.len() as f64;
    let prods: Vec<f64> = vals.chunks_exact(2).map(|c| (c[0] - mean) * (c[1] - mean)).collect();
    let m = pairs as f64;
    let cov = prods.iter().sum::<f64>() / m;
    let var = prods.iter().map(|p| (p - cov).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(PairCovariance { pairs, cov, std_error: (var / m).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChaosRow {
    pub n: usize,
    pub seed: u64,
    pub cov: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosStudy {
    pub functional: ChaosFunctional,
    pub sizes: Vec<usize>,
    pub rows: Vec<ChaosRow>,
    /// Median of `|cov|` over seeds, per size.
    pub median_abs_cov: Vec<f64>,
    /// Seed-averaged covariance and its standard error, per size.
    pub pooled: Vec<(f64, f64)>,
}

impl ChaosStudy {
    pub fn non_increasing(&self) -> bool {
        self.median_abs_cov.windows(2).all(|w| w[1] <= w[0])
    }

    /// Pooled covariance within `k` standard errors of zero at every size.
    pub fn consistent_with_zero(&self, k: f64) -> bool {
        self.pooled.iter().all(|(c, s)| c.abs() <= k * s)
    }
}

pub fn chaos_study(base: &SimConfig, sizes: &[usize], seeds: &[u64], f: ChaosFunctional) -> Result<ChaosStudy, DiagnosticsError> {
    let jobs: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let rows: Result<Vec<ChaosRow>, DiagnosticsError> = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let mut cfg = base.clone();
            cfg.n_particles = n;
            cfg.seed = seed;
            let rec = run(&cfg)?;
            let c = chaoticity_probe(&rec.final_particles, &f)?;
            Ok(ChaosRow { n, seed, cov: c.cov, std_error: c.std_error })
        })
        .collect();
    let rows = rows?;
    let mut median_abs_cov = Vec::new();
    let mut pooled = Vec::new();
    for &n in sizes {
        let sel: Vec<&ChaosRow> = rows.iter().filter(|r| r.n == n).collect();
        let k = sel.len() as f64;
        median_abs_cov.push(median(sel.iter().map(|r| r.cov.abs()).collect()));
        let mean = sel.iter().map(|r| r.cov).sum::<f64>() / k;
        let se = sel.iter().map(|r| r.std_error.powi(2)).sum::<f64>().sqrt() / k;
        pooled.push((mean, se));
    }
    Ok(ChaosStudy { functional: f, sizes: sizes.to_vec(), rows, median_abs_cov, pooled })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftRow {
    pub n: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftStudy {
    pub schedule: Vec<(usize, f64)>,
    pub rows: Vec<DriftRow>,
    pub medians: Vec<f64>,
}

impl DriftStudy {
    pub fn decreasing(&self) -> bool {
        self.medians.windows(2).all(|w| w[1] < w[0])
    }
}

/// Error of the smoothed empirical drift against [`exact_drift`] for i.i.d.
/// samples of `uniform(dom) × N(mean, std² I)`, along an `(N, ε)` schedule.
/// The error of one sample is the mean Euclidean error over `queries`.
pub fn drift_consistency_study(
    dom: &Domain,
    velocity_mean: &[f64],
    velocity_std: f64,
    kernel: &VelocityKernel,
    schedule: &[(usize, f64)],
    seeds: &[u64],
    queries: &[Vector],
) -> Result<DriftStudy, DiagnosticsError> {
    let density = PhaseDensity::Product {
        position: dom.clone(),
        velocity: VelocityDensity::Gaussian { mean: velocity_mean.iter().copied().collect(), std: velocity_std },
    };
    let exact: Vec<Vector> = queries
        .iter()
        .map(|q| exact_drift(q, &density, kernel).map_err(|e| DiagnosticsError::InvalidParameter(e.to_string())))
        .collect::<Result<_, _>>()?;
    let law = InitialLaw {
        position: PositionLaw::Uniform,
        velocity: VelocityLaw::Gaussian { mean: velocity_mean.iter().copied().collect(), std: velocity_std },
        margin: 0.0,
    };
    let jobs: Vec<(usize, f64, u64)> = schedule.iter().flat_map(|&(n, e)| seeds.iter().map(move |&s| (n, e, s))).collect();
    let rows: Result<Vec<DriftRow>, DiagnosticsError> = jobs
        .par_iter()
        .map(|&(n, epsilon, seed)| {
            let particles = sample_initial(&law, dom, n, seed)?;
            let snap = crate::drift::EmpiricalSnapshot::from_pairs(dom.dim(), particles.iter().map(|p| (&p.x[..], &p.u[..])));
            let mol = Mollifier::new(epsilon, dom.dim());
            let est = binned_smoothed_drift(queries, &snap, &mol, kernel, dom);
            let error = est
                .iter()
                .zip(&exact)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / queries.len() as f64;
            Ok(DriftRow { n, epsilon, seed, error })
        })
        .collect();
    let rows = rows?;
    let medians = schedule
        .iter()
        .map(|&(n, e)| median(rows.iter().filter(|r| r.n == n && r.epsilon == e).map(|r| r.error).collect()))
        .collect();
    Ok(DriftStudy { schedule: schedule.to_vec(), rows, medians })
}
