//! Conditional-expectation drift: the exact form for closed-form phase-space
//! densities, and the mollified empirical form used by the particle system.
//!
//! The mollified drift at `x` for an empirical measure of `N` atoms `(yᵢ, vᵢ)` is
//!
//! ```text
//!            (1/N) Σᵢ b(vᵢ) β_ε(yᵢ) φ_ε(x − yᵢ)
//! B_ε(x) = ──────────────────────────────────────
//!           (1/N) Σᵢ β_ε(yᵢ) φ_ε(x − yᵢ)  +  ε
//! ```
//!
//! with `β_ε(y) = 1{dist(y, ∂D) > ε}` and `φ_ε(z) = ε^{-d} φ(z/ε)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Domain, Vector};
use crate::quad::{gauss_hermite, gauss_legendre};

/// Number of nodes per velocity dimension in [`exact_drift`].
pub const EXACT_DRIFT_NODES: usize = 64;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("exact drift needs a product density with a Gaussian or uniform velocity law")]
    UnsupportedDensity,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// `φ_ε(z) = ε^{-d} c_d (1 − |z/ε|²)²` on `|z| < ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mollifier {
    epsilon: f64,
    dim: usize,
    scale: f64,
    inv_eps2: f64,
}

impl Mollifier {
    pub fn new(epsilon: f64, dim: usize) -> Self {
        assert!(epsilon > 0.0, "mollifier width must be positive");
        assert!(dim >= 1);
        Self {
            epsilon,
            dim,
            scale: bump_normalization(dim) / epsilon.powi(dim as i32),
            inv_eps2: 1.0 / (epsilon * epsilon),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Value at a squared distance `r2 = |z|²`.
    #[inline]
    pub fn at_sq_dist(&self, r2: f64) -> f64 {
        let s = r2 * self.inv_eps2;
        if s >= 1.0 {
            0.0
        } else {
            let t = 1.0 - s;
            self.scale * t * t
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.at_sq_dist(z.iter().map(|c| c * c).sum())
    }
}

/// `c_d` with `∫_{|z|<1} c_d (1 − |z|²)² dz = 1`.
pub fn bump_normalization(dim: usize) -> f64 {
    // ∫₀¹ (1 − r²)² r^{d−1} dr = 8 / (d(d+2)(d+4)); |S^{d−1}| = d·V_d.
    let d = dim as f64;
    let radial = 8.0 / (d * (d + 2.0) * (d + 4.0));
    let sphere = d * crate::geometry::unit_ball_volume(dim);
    1.0 / (sphere * radial)
}

/// Bounded continuous velocity kernel `b : ℝ^d → ℝ^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityKernel {
    #[default]
    Zero,
    /// Componentwise `−tanh(u_j)`.
    NegTanh,
    /// Componentwise `clamp(u_j, −c, c)`.
    ClippedLinear { c: f64 },
}

impl VelocityKernel {
    #[inline]
    pub fn component(&self, u: f64) -> f64 {
        match *self {
            VelocityKernel::Zero => 0.0,
            VelocityKernel::NegTanh => -u.tanh(),
            VelocityKernel::ClippedLinear { c } => u.clamp(-c, c),
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vector {
        u.iter().map(|&c| self.component(c)).collect()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, VelocityKernel::Zero)
    }

    /// `sup_u |b(u)|` in the Euclidean norm on ℝ^d.
    pub fn sup_norm(&self, dim: usize) -> f64 {
        let per_component = match *self {
            VelocityKernel::Zero => 0.0,
            VelocityKernel::NegTanh => 1.0,
            VelocityKernel::ClippedLinear { c } => c.abs(),
        };
        per_component * (dim as f64).sqrt()
    }
}

/// Positions and velocities of all particles, frozen at a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSnapshot {
    dim: usize,
    positions: Vec<f64>,
    velocities: Vec<f64>,
}

impl EmpiricalSnapshot {
    /// Builds a snapshot from row-major `N × d` position and velocity buffers.
    pub fn new(dim: usize, positions: Vec<f64>, velocities: Vec<f64>) -> Self {
        assert!(dim >= 1);
        assert_eq!(positions.len(), velocities.len());
        assert_eq!(positions.len() % dim, 0);
        Self { dim, positions, velocities }
    }

    pub fn from_pairs<'a, I>(dim: usize, pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let mut positions = Vec::new();
        let mut velocities = Vec::new();
        for (x, u) in pairs {
            positions.extend_from_slice(x);
            velocities.extend_from_slice(u);
        }
        Self::new(dim, positions, velocities)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }
}

/// `β_ε(y) = 1{signed_distance(y) > ε}`.
pub fn boundary_cutoff(dom: &Domain, y: &[f64], epsilon: f64) -> bool {
    dom.signed_distance(y) > epsilon
}

/// Direct evaluation of the mollified drift at one point, O(N).
pub fn smoothed_drift(
    x: &[f64],
    snap: &EmpiricalSnapshot,
    mol: &Mollifier,
    b: &VelocityKernel,
    dom: &Domain,
) -> Vector {
    let d = snap.dim();
    let eps = mol.epsilon();
    let mut num = Vector::from_elem(0.0, d);
    let mut den = 0.0;
    for i in 0..snap.len() {
        let y = snap.position(i);
        if !boundary_cutoff(dom, y, eps) {
            continue;
        }
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let w = mol.at_sq_dist(r2);
        if w == 0.0 {
            continue;
        }
        den += w;
        for (acc, &v) in num.iter_mut().zip(snap.velocity(i)) {
            *acc += w * b.component(v);
        }
    }
    let inv_n = 1.0 / snap.len().max(1) as f64;
    let denom = den * inv_n + eps;
    num.iter_mut().for_each(|c| *c = *c * inv_n / denom);
    num
}

/// Mollified drift backed by a uniform cell grid over the retained particles.
///
/// Cells have edge at least ε, so a query only visits the 3^d cells around
/// its own. Values agree with [`smoothed_drift`] up to summation order.
#[derive(Debug, Clone)]
pub struct BinnedDrift {
    dim: usize,
    epsilon: f64,
    mollifier: Mollifier,
    inv_n: f64,
    origin: Vector,
    cell: f64,
    shape: Vec<usize>,
    strides: Vec<usize>,
    cell_start: Vec<usize>,
    positions: Vec<f64>,
    kernel_values: Vec<f64>,
}

/// Upper bound on grid cells relative to the particle count.
const MAX_CELLS_PER_PARTICLE: usize = 4;

impl BinnedDrift {
    pub fn new(snap: &EmpiricalSnapshot, mol: &Mollifier, b: &VelocityKernel, dom: &Domain) -> Self {
        let d = snap.dim();
        let eps = mol.epsilon();
        let retained: Vec<usize> = (0..snap.len())
            .filter(|&i| boundary_cutoff(dom, snap.position(i), eps))
            .collect();

        let mut lo = Vector::from_elem(f64::INFINITY, d);
        let mut hi = Vector::from_elem(f64::NEG_INFINITY, d);
        for &i in &retained {
            for (k, &c) in snap.position(i).iter().enumerate() {
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
            }
        }
        if retained.is_empty() {
            lo.iter_mut().for_each(|c| *c = 0.0);
            hi.iter_mut().for_each(|c| *c = 0.0);
        }

        let budget = (MAX_CELLS_PER_PARTICLE * retained.len()).max(1 << 12) as f64;
        let mut cell = eps;
        loop {
            let cells: f64 = lo.iter().zip(&hi).map(|(l, h)| ((h - l) / cell).floor() + 1.0).product();
            if cells <= budget {
                break;
            }
            cell *= 2.0;
        }
        let shape: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| ((h - l) / cell).floor() as usize + 1).collect();
        let mut strides = vec![1usize; d];
        for k in 1..d {
            strides[k] = strides[k - 1] * shape[k - 1];
        }
        let total: usize = shape.iter().product();

        let cell_of = |y: &[f64]| -> usize {
            y.iter()
                .enumerate()
                .map(|(k, &c)| {
                    let idx = ((c - lo[k]) / cell).floor() as usize;
                    idx.min(shape[k] - 1) * strides[k]
                })
                .sum()
        };

        // Counting sort of retained particles by cell.
        let keys: Vec<usize> = retained.iter().map(|&i| cell_of(snap.position(i))).collect();
        let mut cell_start = vec![0usize; total + 1];
        for &key in &keys {
            cell_start[key + 1] += 1;
        }
        for c in 0..total {
            cell_start[c + 1] += cell_start[c];
        }
        let mut fill = cell_start.clone();
        let mut positions = vec![0.0; retained.len() * d];
        let mut kernel_values = vec![0.0; retained.len() * d];
        for (&i, &key) in retained.iter().zip(&keys) {
            let slot = fill[key];
            fill[key] += 1;
            positions[slot * d..(slot + 1) * d].copy_from_slice(snap.position(i));
            for (out, &v) in kernel_values[slot * d..(slot + 1) * d].iter_mut().zip(snap.velocity(i)) {
                *out = b.component(v);
            }
        }

        Self {
            dim: d,
            epsilon: eps,
            mollifier: *mol,
            inv_n: 1.0 / snap.len().max(1) as f64,
            origin: lo,
            cell,
            shape,
            strides,
            cell_start,
            positions,
            kernel_values,
        }
    }

    /// Number of particles that survive the boundary cutoff.
    pub fn retained(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Vector {
        let d = self.dim;
        let mut num = Vector::from_elem(0.0, d);
        let mut den = 0.0;

        // Neighbour index range per axis, clipped to the grid.
        let mut lo_idx: Vector = Vector::new();
        let mut hi_idx: Vector = Vector::new();
        for (k, &xk) in x.iter().enumerate().take(d) {
            let c = ((xk - self.origin[k]) / self.cell).floor();
            let lo = (c - 1.0).max(0.0);
            let hi = (c + 1.0).min(self.shape[k] as f64 - 1.0);
            if lo > hi || !c.is_finite() {
                return self.finish(num, den);
            }
            lo_idx.push(lo);
            hi_idx.push(hi);
        }

        let mut idx: Vec<usize> = lo_idx.iter().map(|&c| c as usize).collect();
        loop {
            let key: usize = idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum();
            for slot in self.cell_start[key]..self.cell_start[key + 1] {
                let y = &self.positions[slot * d..(slot + 1) * d];
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let w = self.mollifier.at_sq_dist(r2);
                if w == 0.0 {
                    continue;
                }
                den += w;
                for (acc, bv) in num.iter_mut().zip(&self.kernel_values[slot * d..(slot + 1) * d]) {
                    *acc += w * bv;
                }
            }
            // Odometer over the neighbour block.
            let mut k = 0;
            loop {
                if k == d {
                    return self.finish(num, den);
                }
                if idx[k] < hi_idx[k] as usize {
                    idx[k] += 1;
                    break;
                }
                idx[k] = lo_idx[k] as usize;
                k += 1;
            }
        }
    }

    fn finish(&self, mut num: Vector, den: f64) -> Vector {
        let denom = den * self.inv_n + self.epsilon;
        num.iter_mut().for_each(|c| *c = *c * self.inv_n / denom);
        num
    }
}

/// Grid-accelerated mollified drift at many query points.
pub fn binned_smoothed_drift(
    queries: &[Vector],
    snap: &EmpiricalSnapshot,
    mol: &Mollifier,
    b: &VelocityKernel,
    dom: &Domain,
) -> Vec<Vector> {
    let field = BinnedDrift::new(snap, mol, b, dom);
    queries.iter().map(|x| field.eval(x)).collect()
}

/// Velocity marginal of a product phase-space density.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityDensity {
    /// Isotropic Gaussian `N(mean, std² I)`.
    Gaussian { mean: Vector, std: f64 },
    /// Uniform on the box `[lo, hi]`.
    Uniform { lo: Vector, hi: Vector },
}

impl VelocityDensity {
    pub fn dim(&self) -> usize {
        match self {
            VelocityDensity::Gaussian { mean, .. } => mean.len(),
            VelocityDensity::Uniform { lo, .. } => lo.len(),
        }
    }
}

pub type JointDensityFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Closed-form phase-space density `γ(x, v)`.
#[derive(Clone)]
pub enum PhaseDensity {
    /// `γ(x, v) = p(x) q(v)` with `p` uniform on the domain.
    Product { position: Domain, velocity: VelocityDensity },
    /// Arbitrary joint density; accepted for evaluation elsewhere but not by [`exact_drift`].
    Joint(JointDensityFn),
}

impl std::fmt::Debug for PhaseDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhaseDensity::Product { position, velocity } => f
                .debug_struct("Product")
                .field("position", position)
                .field("velocity", velocity)
                .finish(),
            PhaseDensity::Joint(_) => f.write_str("Joint(..)"),
        }
    }
}

/// `B[x; γ] = ∫ b(v) γ(x,v) dv / ∫ γ(x,v) dv`, zero where the position
/// marginal vanishes.
///
/// The presets of [`VelocityKernel`] act componentwise, so each component
/// reduces to a one-dimensional integral: 64-point Gauss–Hermite for Gaussian
/// velocities, 64-point Gauss–Legendre for uniform ones.
pub fn exact_drift(x: &[f64], density: &PhaseDensity, b: &VelocityKernel) -> Result<Vector, DriftError> {
    let (position, velocity) = match density {
        PhaseDensity::Product { position, velocity } => (position, velocity),
        PhaseDensity::Joint(_) => return Err(DriftError::UnsupportedDensity),
    };
    let d = position.dim();
    if x.len() != d {
        return Err(DriftError::DimensionMismatch { expected: d, got: x.len() });
    }
    if velocity.dim() != d {
        return Err(DriftError::DimensionMismatch { expected: d, got: velocity.dim() });
    }
    if position.signed_distance(x) < 0.0 {
        return Ok(Vector::from_elem(0.0, d));
    }
    let out = match velocity {
        VelocityDensity::Gaussian { mean, std } => {
            let (nodes, weights) = gauss_hermite(EXACT_DRIFT_NODES);
            let spread = std::f64::consts::SQRT_2 * std;
            mean.iter()
                .map(|&m| symmetric_rule_mean(&nodes, &weights, m, spread, |v| b.component(v)))
                .collect()
        }
        VelocityDensity::Uniform { lo, hi } => {
            let (nodes, weights) = gauss_legendre(EXACT_DRIFT_NODES);
            lo.iter()
                .zip(hi)
                .map(|(&a, &c)| symmetric_rule_mean(&nodes, &weights, 0.5 * (a + c), 0.5 * (c - a), |v| b.component(v)))
                .collect()
        }
    };
    Ok(out)
}

/// Weighted mean of `f(center + scale·zᵢ)` over a rule with mirrored nodes.
///
/// Mirrored nodes are summed in pairs so an odd `f` about `center` cancels exactly.
fn symmetric_rule_mean<F: Fn(f64) -> f64>(nodes: &[f64], weights: &[f64], center: f64, scale: f64, f: F) -> f64 {
    let n = nodes.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let w = weights[i];
        num += w * (f(center + scale * nodes[i]) + f(center + scale * nodes[j]));
        den += 2.0 * w;
    }
    if n % 2 == 1 {
        let w = weights[n / 2];
        num += w * f(center + scale * nodes[n / 2]);
        den += w;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::quad::{gauss_kronrod, Tolerance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use smallvec::smallvec;

    fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, dom: &Domain) -> EmpiricalSnapshot {
        let d = dom.dim();
        let mut pos = Vec::new();
        let mut vel = Vec::new();
        for _ in 0..n {
            pos.extend(dom.sample_uniform(0.0, rng).unwrap());
            for _ in 0..d {
                vel.push(rng.random_range(-3.0..3.0));
            }
        }
        EmpiricalSnapshot::new(d, pos, vel)
    }

    #[test]
    fn normalization_constants() {
        assert!((bump_normalization(1) - 15.0 / 16.0).abs() < 1e-15);
        assert!((bump_normalization(2) - 3.0 / PI).abs() < 1e-15);
        assert!((bump_normalization(3) - 105.0 / (32.0 * PI)).abs() < 1e-15);
    }

    // Cartesian iterated quadrature, independent of the radial formula for c_d.
    #[test]
    fn mollifier_integrates_to_one() {
        let tol = Tolerance::new(1e-12, 1e-12);
        for &eps in &[0.05, 0.2, 1.0] {
            let m1 = Mollifier::new(eps, 1);
            let one_d = gauss_kronrod(|x| m1.eval(&[x]), -eps, eps, tol, 200).value;
            assert!((one_d - 1.0).abs() < 1e-6, "d=1 eps={eps}: {one_d}");

            let m2 = Mollifier::new(eps, 2);
            let two_d = gauss_kronrod(
                |x| {
                    let h = (eps * eps - x * x).max(0.0).sqrt();
                    gauss_kronrod(|y| m2.eval(&[x, y]), -h, h, tol, 200).value
                },
                -eps,
                eps,
                tol,
                200,
            )
            .value;
            assert!((two_d - 1.0).abs() < 1e-6, "d=2 eps={eps}: {two_d}");
        }
    }

    #[test]
    fn cutoff_examples() {
        let ball = Domain::unit_ball(2);
        assert!(boundary_cutoff(&ball, &[0.0, 0.0], 0.1));
        assert!(!boundary_cutoff(&ball, &[0.95, 0.0], 0.1));
        let hs = Domain::half_space(2).unwrap();
        assert!(boundary_cutoff(&hs, &[0.2, 5.0], 0.1));
    }

    #[test]
    fn single_atom_drift() {
        let ball = Domain::unit_ball(2);
        let mol = Mollifier::new(0.3, 2);
        let b = VelocityKernel::NegTanh;
        let y = [0.1, 0.0];
        let v = [0.7, -0.2];
        let snap = EmpiricalSnapshot::new(2, y.to_vec(), v.to_vec());
        let x = [0.2, 0.05];
        let w = mol.eval(&[x[0] - y[0], x[1] - y[1]]);
        let got = smoothed_drift(&x, &snap, &mol, &b, &ball);
        for k in 0..2 {
            let expected = b.component(v[k]) * w / (w + 0.3);
            assert!((got[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn far_query_and_full_cutoff_give_zero() {
        let ball = Domain::unit_ball(2);
        let mol = Mollifier::new(0.1, 2);
        let b = VelocityKernel::NegTanh;
        let snap = EmpiricalSnapshot::new(2, vec![0.0, 0.0, 0.05, 0.0], vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(smoothed_drift(&[0.5, 0.5], &snap, &mol, &b, &ball).as_slice(), &[0.0, 0.0]);
        let near_wall = EmpiricalSnapshot::new(2, vec![0.95, 0.0, 0.0, -0.97], vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(smoothed_drift(&[0.9, 0.0], &near_wall, &mol, &b, &ball).as_slice(), &[0.0, 0.0]);
        let field = BinnedDrift::new(&near_wall, &mol, &b, &ball);
        assert_eq!(field.retained(), 0);
        assert_eq!(field.eval(&[0.9, 0.0]).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn binned_matches_naive_with_all_particles_in_one_cell() {
        let ball = Domain::unit_ball(2);
        let mol = Mollifier::new(0.5, 2);
        let b = VelocityKernel::ClippedLinear { c: 1.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pos = Vec::new();
        let mut vel = Vec::new();
        for _ in 0..40 {
            pos.push(rng.random_range(-0.1..0.1));
            pos.push(rng.random_range(-0.1..0.1));
            vel.push(rng.random_range(-3.0..3.0));
            vel.push(rng.random_range(-3.0..3.0));
        }
        let snap = EmpiricalSnapshot::new(2, pos, vel);
        let q: Vec<Vector> = vec![smallvec![0.0, 0.0], smallvec![0.3, -0.2], smallvec![0.9, 0.0]];
        let fast = binned_smoothed_drift(&q, &snap, &mol, &b, &ball);
        for (x, f) in q.iter().zip(&fast) {
            let slow = smoothed_drift(x, &snap, &mol, &b, &ball);
            for k in 0..2 {
                assert!((slow[k] - f[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn binned_matches_naive_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let domains = [Domain::unit_ball(2), Domain::interval(1.0).unwrap(), Domain::unit_ball(3)];
        for trial in 0..30 {
            let dom = &domains[trial % domains.len()];
            let eps = rng.random_range(0.02..0.5);
            let mol = Mollifier::new(eps, dom.dim());
            let b = VelocityKernel::NegTanh;
            let snap = random_snapshot(&mut rng, 100, dom);
            let queries: Vec<Vector> = (0..20).map(|_| dom.sample_uniform(0.0, &mut rng).unwrap()).collect();
            let field = BinnedDrift::new(&snap, &mol, &b, dom);
            for x in &queries {
                let slow = smoothed_drift(x, &snap, &mol, &b, dom);
                let fast = field.eval(x);
                for k in 0..dom.dim() {
                    assert!((slow[k] - fast[k]).abs() <= 1e-12, "trial {trial}");
                }
            }
        }
    }

    #[test]
    fn exact_drift_examples() {
        let ball = Domain::unit_ball(2);
        let centered = PhaseDensity::Product {
            position: ball.clone(),
            velocity: VelocityDensity::Gaussian { mean: smallvec![0.0, 0.0], std: 1.0 },
        };
        for x in [[0.0, 0.0], [0.3, -0.5], [0.99, 0.0]] {
            let v = exact_drift(&x, &centered, &VelocityKernel::NegTanh).unwrap();
            assert_eq!(v.as_slice(), &[0.0, 0.0]);
        }

        // E[clamp(V, −10, 10)] for V ~ N(1, 1), high-precision reference.
        let shifted = PhaseDensity::Product {
            position: ball.clone(),
            velocity: VelocityDensity::Gaussian { mean: smallvec![1.0, 0.0], std: 1.0 },
        };
        let v = exact_drift(&[0.2, 0.1], &shifted, &VelocityKernel::ClippedLinear { c: 10.0 }).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-10);
        assert!(v[1].abs() < 1e-12);

        // Independent of x inside the support; E[−tanh V], V ~ N(1,1) = −0.550400490793327...
        let a = exact_drift(&[0.0, 0.0], &shifted, &VelocityKernel::NegTanh).unwrap();
        let c = exact_drift(&[0.7, -0.3], &shifted, &VelocityKernel::NegTanh).unwrap();
        assert_eq!(a, c);
        // tanh has poles at ±iπ/2, which caps Gauss–Hermite convergence near 1e-10.
        assert!((a[0] + 0.550_400_490_793_327_2).abs() < 1e-9, "{a:?}");

        // Outside the position support the drift is zero.
        assert_eq!(exact_drift(&[2.0, 0.0], &shifted, &VelocityKernel::NegTanh).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn exact_drift_uniform_velocity_and_errors() {
        let iv = Domain::interval(1.0).unwrap();
        let dens = PhaseDensity::Product {
            position: iv.clone(),
            velocity: VelocityDensity::Uniform { lo: smallvec![0.0], hi: smallvec![2.0] },
        };
        // (1/2)∫₀² clamp(v, −1, 1) dv = (1/2)(1/2 + 1) = 0.75
        let v = exact_drift(&[0.5], &dens, &VelocityKernel::ClippedLinear { c: 1.0 }).unwrap();
        assert!((v[0] - 0.75).abs() < 1e-4, "{v:?}");
        // −(1/2)∫₀² tanh v dv = −ln(cosh 2)/2
        let v = exact_drift(&[0.5], &dens, &VelocityKernel::NegTanh).unwrap();
        assert!((v[0] + 2f64.cosh().ln() / 2.0).abs() < 1e-13);

        let joint = PhaseDensity::Joint(Arc::new(|_x: &[f64], _v: &[f64]| 1.0));
        assert!(matches!(
            exact_drift(&[0.5], &joint, &VelocityKernel::NegTanh),
            Err(DriftError::UnsupportedDensity)
        ));
    }

    proptest! {
        #[test]
        fn smoothed_drift_is_bounded_by_kernel_sup(
            seed in any::<u64>(),
            eps in 0.02f64..0.6,
            c in 0.1f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dom = Domain::unit_ball(2);
            let snap = random_snapshot(&mut rng, 30, &dom);
            let mol = Mollifier::new(eps, 2);
            for b in [VelocityKernel::NegTanh, VelocityKernel::ClippedLinear { c }] {
                let x = dom.sample_uniform(0.0, &mut rng).unwrap();
                let v = smoothed_drift(&x, &snap, &mol, &b, &dom);
                prop_assert!(crate::geometry::norm(&v) <= b.sup_norm(2));
            }
        }
    }
}
