//! Confining domains, boundary normals, ballistic exit times and the
//! specular reflection map.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Point or velocity in ℝ^d. Stored inline for d ≤ 3.
pub type Vector = SmallVec<[f64; 3]>;

/// Relative width of the band around ∂D treated as "on the boundary".
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is not on the boundary (signed distance {distance:e})")]
    NotOnBoundary { distance: f64 },
    #[error("trajectory starts outside the domain (signed distance {distance:e})")]
    StartsOutside { distance: f64 },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("interior margin {margin} is not below the inradius {inradius}")]
    InfeasibleMargin { margin: f64, inradius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DomainSpec", try_from = "DomainSpec")]
pub enum Domain {
    /// Closed ball of the given radius.
    Ball { center: Vector, radius: f64 },
    /// `{x₁ > 0} × ℝ^{d−1}`. Not compact; only meant for free-Langevin
    /// passage-time experiments.
    HalfSpace { dim: usize },
    /// `(0, length)` in one dimension.
    Interval { length: f64 },
}

/// Config-file form: `{ kind = "ball", radius = 1.0, dim = 2 }`,
/// `{ kind = "halfspace", dim = 2 }` or `{ kind = "interval", length = 1.0 }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
}

impl TryFrom<DomainSpec> for Domain {
    type Error = GeometryError;

    fn try_from(spec: DomainSpec) -> Result<Self, Self::Error> {
        let invalid = |msg: &str| GeometryError::InvalidDomain(msg.to_string());
        match spec.kind.as_str() {
            "ball" => {
                let radius = spec.radius.ok_or_else(|| invalid("ball needs `radius`"))?;
                let center = match (spec.center, spec.dim) {
                    (Some(c), Some(d)) if c.len() != d => return Err(invalid("`center` length differs from `dim`")),
                    (Some(c), _) => c,
                    (None, Some(d)) => vec![0.0; d],
                    (None, None) => return Err(invalid("ball needs `dim` or `center`")),
                };
                Domain::ball(&center, radius)
            }
            "halfspace" => Domain::half_space(spec.dim.ok_or_else(|| invalid("halfspace needs `dim`"))?),
            "interval" => {
                if spec.dim.is_some_and(|d| d != 1) {
                    return Err(invalid("interval is one-dimensional"));
                }
                Domain::interval(spec.length.ok_or_else(|| invalid("interval needs `length`"))?)
            }
            other => Err(GeometryError::InvalidDomain(format!(
                "unknown kind `{other}` (expected ball, halfspace or interval)"
            ))),
        }
    }
}

impl From<Domain> for DomainSpec {
    fn from(dom: Domain) -> Self {
        let dim = Some(dom.dim());
        match dom {
            Domain::Ball { center, radius } => DomainSpec {
                kind: "ball".into(),
                dim,
                radius: Some(radius),
                center: center.iter().any(|&c| c != 0.0).then(|| center.to_vec()),
                length: None,
            },
            Domain::HalfSpace { .. } => DomainSpec { kind: "halfspace".into(), dim, radius: None, center: None, length: None },
            Domain::Interval { length } => {
                DomainSpec { kind: "interval".into(), dim, radius: None, center: None, length: Some(length) }
            }
        }
    }
}

/// First boundary contact of a ballistic segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Exit {
    pub time: f64,
    pub hit: Vector,
}

impl Domain {
    pub fn ball(center: &[f64], radius: f64) -> Result<Self, GeometryError> {
        if center.is_empty() {
            return Err(GeometryError::InvalidDomain("ball needs dimension ≥ 1".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidDomain(format!("radius must be > 0, got {radius}")));
        }
        Ok(Domain::Ball { center: center.iter().copied().collect(), radius })
    }

    pub fn unit_ball(dim: usize) -> Self {
        Domain::Ball { center: smallvec::smallvec![0.0; dim], radius: 1.0 }
    }

    pub fn half_space(dim: usize) -> Result<Self, GeometryError> {
        if dim == 0 {
            return Err(GeometryError::InvalidDomain("half-space needs dimension ≥ 1".into()));
        }
        Ok(Domain::HalfSpace { dim })
    }

    pub fn interval(length: f64) -> Result<Self, GeometryError> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(GeometryError::InvalidDomain(format!("length must be > 0, got {length}")));
        }
        Ok(Domain::Interval { length })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.len(),
            Domain::HalfSpace { dim } => *dim,
            Domain::Interval { .. } => 1,
        }
    }

    /// Characteristic length used to scale tolerances.
    pub fn scale(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => *radius,
            Domain::HalfSpace { .. } => 1.0,
            Domain::Interval { length } => *length,
        }
    }

    pub fn tol_boundary(&self) -> f64 {
        BOUNDARY_TOLERANCE * self.scale()
    }

    /// Whether the domain has a compact boundary (Ball, Interval).
    pub fn is_compact(&self) -> bool {
        !matches!(self, Domain::HalfSpace { .. })
    }

    /// Largest signed distance attained inside the domain.
    pub fn inradius(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => *radius,
            Domain::HalfSpace { .. } => f64::INFINITY,
            Domain::Interval { length } => 0.5 * length,
        }
    }

    /// Lebesgue measure of D, `None` for the half-space.
    pub fn volume(&self) -> Option<f64> {
        match self {
            Domain::Ball { center, radius } => Some(unit_ball_volume(center.len()) * radius.powi(center.len() as i32)),
            Domain::HalfSpace { .. } => None,
            Domain::Interval { length } => Some(*length),
        }
    }

    /// Surface measure of ∂D (counting measure for the interval), `None` for the half-space.
    pub fn surface_area(&self) -> Option<f64> {
        match self {
            Domain::Ball { center, radius } => {
                let d = center.len();
                Some(d as f64 * unit_ball_volume(d) * radius.powi(d as i32 - 1))
            }
            Domain::HalfSpace { .. } => None,
            Domain::Interval { .. } => Some(2.0),
        }
    }

    /// Positive inside, zero on ∂D, negative outside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Ball { center, radius } => radius - norm(&sub(x, center)),
            Domain::HalfSpace { .. } => x[0],
            Domain::Interval { length } => x[0].min(length - x[0]),
        }
    }

    /// Outward unit normal at a boundary point.
    pub fn outward_normal(&self, x: &[f64]) -> Result<Vector, GeometryError> {
        let distance = self.signed_distance(x);
        if distance.abs() > self.tol_boundary() {
            return Err(GeometryError::NotOnBoundary { distance });
        }
        Ok(self.normal_at_nearest(x))
    }

    /// Outward normal at the boundary point nearest to `x` (radial for the ball).
    ///
    /// For the ball centre every direction is nearest; `e₁` is returned.
    pub fn normal_at_nearest(&self, x: &[f64]) -> Vector {
        match self {
            Domain::Ball { center, .. } => {
                let p = sub(x, center);
                let r = norm(&p);
                if r == 0.0 {
                    let mut e = Vector::from_elem(0.0, p.len());
                    e[0] = 1.0;
                    e
                } else {
                    p.iter().map(|c| c / r).collect()
                }
            }
            Domain::HalfSpace { dim } => {
                let mut n = Vector::from_elem(0.0, *dim);
                n[0] = -1.0;
                n
            }
            Domain::Interval { length } => {
                if x[0] <= 0.5 * length {
                    smallvec::smallvec![-1.0]
                } else {
                    smallvec::smallvec![1.0]
                }
            }
        }
    }

    /// Boundary point nearest to `x`.
    pub fn nearest_boundary_point(&self, x: &[f64]) -> Vector {
        match self {
            Domain::Ball { center, radius } => {
                let n = self.normal_at_nearest(x);
                center.iter().zip(&n).map(|(c, n)| c + radius * n).collect()
            }
            Domain::HalfSpace { .. } => {
                let mut p: Vector = x.iter().copied().collect();
                p[0] = 0.0;
                p
            }
            Domain::Interval { length } => {
                if x[0] <= 0.5 * length {
                    smallvec::smallvec![0.0]
                } else {
                    smallvec::smallvec![*length]
                }
            }
        }
    }

    /// Smallest `s ∈ [0, h]` with `x + s·u ∈ ∂D`, or `None` if the segment
    /// stays inside.
    ///
    /// A particle sitting on the boundary (within tolerance) and moving
    /// outward exits at `s = 0`.
    pub fn first_exit_time(&self, x: &[f64], u: &[f64], h: f64) -> Result<Option<Exit>, GeometryError> {
        let distance = self.signed_distance(x);
        if distance < -self.tol_boundary() {
            return Err(GeometryError::StartsOutside { distance });
        }
        let time = match self {
            Domain::Ball { center, radius } => {
                let a = dot(u, u);
                if a == 0.0 {
                    return Ok(None);
                }
                let p = sub(x, center);
                let half_b = dot(&p, u);
                let c = dot(&p, &p) - radius * radius;
                let disc = half_b * half_b - a * c;
                if disc < 0.0 {
                    return Ok(None);
                }
                let sq = disc.sqrt();
                // Larger root of a s² + 2 half_b s + c, written to avoid cancellation.
                let s = if half_b <= 0.0 { (sq - half_b) / a } else { -c / (half_b + sq) };
                if half_b == 0.0 && c >= 0.0 {
                    // Tangent at the boundary: grazing, no reflection.
                    return Ok(None);
                }
                s.max(0.0)
            }
            Domain::HalfSpace { .. } => {
                if u[0] >= 0.0 {
                    return Ok(None);
                }
                (x[0] / -u[0]).max(0.0)
            }
            Domain::Interval { length } => {
                if u[0] < 0.0 {
                    (x[0] / -u[0]).max(0.0)
                } else if u[0] > 0.0 {
                    ((length - x[0]) / u[0]).max(0.0)
                } else {
                    return Ok(None);
                }
            }
        };
        if time > h {
            return Ok(None);
        }
        let mut hit: Vector = x.iter().zip(u).map(|(x, u)| x + time * u).collect();
        match self {
            Domain::Ball { .. } => {}
            Domain::HalfSpace { .. } => hit[0] = 0.0,
            Domain::Interval { length } => hit[0] = if u[0] < 0.0 { 0.0 } else { *length },
        }
        Ok(Some(Exit { time, hit }))
    }

    /// Draws a point uniformly from `{x ∈ D : signed_distance(x) ≥ margin}`.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, margin: f64, rng: &mut R) -> Result<Vector, GeometryError> {
        if margin >= self.inradius() {
            return Err(GeometryError::InfeasibleMargin { margin, inradius: self.inradius() });
        }
        match self {
            Domain::Ball { center, radius } => {
                // Uniform direction times radius with density ∝ r^{d-1}.
                let d = center.len();
                let r_max = radius - margin.max(0.0);
                let mut dir: Vector = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let mut len = norm(&dir);
                while len == 0.0 {
                    dir = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                    len = norm(&dir);
                }
                let w: f64 = rng.random();
                let r = r_max * w.powf(1.0 / d as f64);
                Ok(center.iter().zip(&dir).map(|(c, e)| c + r * e / len).collect())
            }
            Domain::HalfSpace { .. } => Err(GeometryError::InvalidDomain(
                "uniform law over a half-space does not exist".into(),
            )),
            Domain::Interval { length } => {
                let m = margin.max(0.0);
                let w: f64 = rng.random();
                Ok(smallvec::smallvec![m + w * (length - 2.0 * m)])
            }
        }
    }
}

/// `u − 2(u·n)n`.
pub fn specular_reflect(u: &[f64], n: &[f64]) -> Vector {
    let un = dot(u, n);
    u.iter().zip(n).map(|(u, n)| u - 2.0 * un * n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(a, b)| a - b).collect()
}

/// Volume of the unit ball in ℝ^d.
pub fn unit_ball_volume(d: usize) -> f64 {
    // V_d = 2π/d · V_{d−2}, V_0 = 1, V_1 = 2.
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / d as f64 * unit_ball_volume(d - 2),
    }
}
