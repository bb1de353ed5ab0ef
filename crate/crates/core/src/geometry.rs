//! Test bodies: membership, exact volumes and moments, nearest-point
//! projection, support functions, uniform samplers and section pieces for
//! body-adapted quadrature.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quadrature::{nested_rule, End, Piece};

/// Shapes available as uniform test bodies. All are centered at the origin
/// except the simplex, which has a corner there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Shape {
    Cube { side: f64 },
    Ball { radius: f64 },
    /// `{x ≥ 0, Σx ≤ side}`.
    Simplex { side: f64 },
    Ellipsoid { axes: Vec<f64> },
    CubeTruncatedByBall { side: f64, radius: f64 },
    /// The cube intersected with `{x_1 ≤ offset}`.
    HalfspaceTruncation { side: f64, offset: f64 },
}

/// A shape, optionally translated by `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
}

/// A validated body in a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub dim: usize,
    pub shape: Shape,
    pub center: Vec<f64>,
}

pub fn unit_ball_volume(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    (h * PI.ln() - ln_gamma(h + 1.0)).exp()
}

impl Shape {
    /// The shape dilated by `s > 0` about its local origin.
    pub fn scaled(&self, s: f64) -> Shape {
        match self {
            Shape::Cube { side } => Shape::Cube { side: side * s },
            Shape::Ball { radius } => Shape::Ball { radius: radius * s },
            Shape::Simplex { side } => Shape::Simplex { side: side * s },
            Shape::Ellipsoid { axes } => Shape::Ellipsoid { axes: axes.iter().map(|a| a * s).collect() },
            Shape::CubeTruncatedByBall { side, radius } => {
                Shape::CubeTruncatedByBall { side: side * s, radius: radius * s }
            }
            Shape::HalfspaceTruncation { side, offset } => {
                Shape::HalfspaceTruncation { side: side * s, offset: offset * s }
            }
        }
    }
}

impl BodySpec {
    pub fn new(shape: Shape) -> Self {
        BodySpec { shape, center: None }
    }

    pub fn build(&self, dim: usize) -> Result<Body> {
        if dim == 0 {
            return Err(Error::InvalidSpec("dimension must be at least 1".into()));
        }
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")))
            }
        };
        match &self.shape {
            Shape::Cube { side } | Shape::Simplex { side } => pos("side", *side)?,
            Shape::Ball { radius } => pos("radius", *radius)?,
            Shape::Ellipsoid { axes } => {
                if axes.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: axes.len() });
                }
                for a in axes {
                    pos("axis", *a)?;
                }
            }
            Shape::CubeTruncatedByBall { side, radius } => {
                pos("side", *side)?;
                pos("radius", *radius)?;
            }
            Shape::HalfspaceTruncation { side, offset } => {
                pos("side", *side)?;
                if !(*offset > -side / 2.0) || !offset.is_finite() {
                    return Err(Error::InvalidSpec(format!("offset {offset} leaves an empty body")));
                }
            }
        }
        let center = match &self.center {
            Some(c) if c.len() != dim => return Err(Error::DimensionMismatch { expected: dim, got: c.len() }),
            Some(c) => c.clone(),
            None => vec![0.0; dim],
        };
        Ok(Body { dim, shape: self.shape.clone(), center })
    }
}

impl Body {
    fn local(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(a, b)| a - b).collect()
    }

    /// Axis-aligned box `[lo, hi]` in local coordinates, if the body is one.
    pub fn as_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.dim;
        match &self.shape {
            Shape::Cube { side } => Some((vec![-side / 2.0; n], vec![side / 2.0; n])),
            Shape::HalfspaceTruncation { side, offset } => {
                let lo = vec![-side / 2.0; n];
                let mut hi = vec![side / 2.0; n];
                hi[0] = hi[0].min(*offset);
                Some((lo, hi))
            }
            Shape::CubeTruncatedByBall { side, radius } if *radius >= side * (n as f64).sqrt() / 2.0 => {
                Some((vec![-side / 2.0; n], vec![side / 2.0; n]))
            }
            _ => None,
        }
    }

    /// Bounding box in global coordinates.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let (lo, hi) = match &self.shape {
            Shape::Ball { radius } => (vec![-radius; n], vec![*radius; n]),
            Shape::Ellipsoid { axes } => (axes.iter().map(|a| -a).collect(), axes.clone()),
            Shape::Simplex { side } => (vec![0.0; n], vec![*side; n]),
            Shape::CubeTruncatedByBall { side, radius } => {
                let h = (side / 2.0).min(*radius);
                (vec![-h; n], vec![h; n])
            }
            _ => self.as_box().expect("box-shaped"),
        };
        let lo = lo.iter().zip(&self.center).map(|(a, c)| a + c).collect();
        let hi = hi.iter().zip(&self.center).map(|(a, c)| a + c).collect();
        (lo, hi)
    }

    /// Radius of a centered ball containing the body.
    pub fn radius(&self) -> f64 {
        let n = self.dim as f64;
        let local = match &self.shape {
            Shape::Cube { side } => side * n.sqrt() / 2.0,
            Shape::Ball { radius } => *radius,
            Shape::Ellipsoid { axes } => axes.iter().cloned().fold(0.0, f64::max),
            Shape::Simplex { side } => *side,
            Shape::CubeTruncatedByBall { side, radius } => radius.min(side * n.sqrt() / 2.0),
            Shape::HalfspaceTruncation { side, .. } => side * n.sqrt() / 2.0,
        };
        local + self.center.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let y = self.local(x);
        let sq: f64 = y.iter().map(|v| v * v).sum();
        match &self.shape {
            Shape::Ball { radius } => sq <= radius * radius,
            Shape::Ellipsoid { axes } => y.iter().zip(axes).map(|(v, a)| (v / a).powi(2)).sum::<f64>() <= 1.0,
            Shape::Simplex { side } => y.iter().all(|v| *v >= 0.0) && y.iter().sum::<f64>() <= *side,
            Shape::CubeTruncatedByBall { side, radius } => {
                y.iter().all(|v| v.abs() <= side / 2.0) && sq <= radius * radius
            }
            _ => {
                let (lo, hi) = self.as_box().expect("box-shaped");
                y.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
            }
        }
    }

    /// Exact volume where a closed form exists; nested quadrature otherwise.
    pub fn volume(&self) -> Result<f64> {
        let n = self.dim;
        Ok(match &self.shape {
            Shape::Ball { radius } => unit_ball_volume(n) * radius.powi(n as i32),
            Shape::Ellipsoid { axes } => unit_ball_volume(n) * axes.iter().product::<f64>(),
            Shape::Simplex { side } => side.powi(n as i32) / (1..=n).map(|k| k as f64).product::<f64>(),
            Shape::CubeTruncatedByBall { side, radius } if self.as_box().is_none() => {
                if *radius <= side / 2.0 {
                    unit_ball_volume(n) * radius.powi(n as i32)
                } else {
                    let (_, w) = self.section_rule(48)?;
                    w.iter().sum()
                }
            }
            _ => {
                let (lo, hi) = self.as_box().expect("box-shaped");
                lo.iter().zip(&hi).map(|(l, h)| h - l).product()
            }
        })
    }

    /// Mean and covariance of the uniform distribution on the body.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.dim;
        let nf = n as f64;
        let center = DVector::from_column_slice(&self.center);
        let (mean, cov) = match &self.shape {
            Shape::Ball { radius } => (DVector::zeros(n), DMatrix::identity(n, n) * (radius * radius / (nf + 2.0))),
            Shape::Ellipsoid { axes } => {
                let d = DVector::from_iterator(n, axes.iter().map(|a| a * a / (nf + 2.0)));
                (DVector::zeros(n), DMatrix::from_diagonal(&d))
            }
            Shape::Simplex { side } => {
                let s2 = side * side;
                let denom = (nf + 1.0).powi(2) * (nf + 2.0);
                let cov = DMatrix::from_fn(n, n, |i, j| if i == j { s2 * nf / denom } else { -s2 / denom });
                (DVector::from_element(n, side / (nf + 1.0)), cov)
            }
            Shape::CubeTruncatedByBall { side, radius } if self.as_box().is_none() => {
                if *radius <= side / 2.0 {
                    (DVector::zeros(n), DMatrix::identity(n, n) * (radius * radius / (nf + 2.0)))
                } else {
                    let (p, w) = self.section_rule(48)?;
                    let vol: f64 = w.iter().sum();
                    let m2: f64 = p.chunks_exact(n).zip(&w).map(|(x, w)| w * x[0] * x[0]).sum::<f64>() / vol;
                    (DVector::zeros(n), DMatrix::identity(n, n) * m2)
                }
            }
            _ => {
                let (lo, hi) = self.as_box().expect("box-shaped");
                let mean = DVector::from_iterator(n, lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)));
                let var = DVector::from_iterator(n, lo.iter().zip(&hi).map(|(l, h)| (h - l).powi(2) / 12.0));
                (mean, DMatrix::from_diagonal(&var))
            }
        };
        Ok((mean + center, cov))
    }

    /// Body-adapted nested rule (global coordinates, weights sum to volume).
    pub fn section_rule(&self, order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim;
        if n > 3 {
            return Err(Error::QuadratureDimensionTooHigh { dim: n, max: 3 });
        }
        let shape = self.shape.clone();
        let boxed = self.as_box();
        let sections = move |prefix: &[f64]| -> Vec<Piece> {
            let k = prefix.len();
            let sq: f64 = prefix.iter().map(|v| v * v).sum();
            match &shape {
                Shape::Ball { radius } => {
                    let rho = (radius * radius - sq).max(0.0).sqrt();
                    vec![Piece { lo: -rho, hi: rho, lo_end: End::Sqrt, hi_end: End::Sqrt }]
                }
                Shape::Ellipsoid { axes } => {
                    let used: f64 = prefix.iter().zip(axes).map(|(v, a)| (v / a).powi(2)).sum();
                    let rho = axes[k] * (1.0 - used).max(0.0).sqrt();
                    vec![Piece { lo: -rho, hi: rho, lo_end: End::Sqrt, hi_end: End::Sqrt }]
                }
                Shape::Simplex { side } => {
                    vec![Piece::regular(0.0, (side - prefix.iter().sum::<f64>()).max(0.0))]
                }
                Shape::CubeTruncatedByBall { side, radius } if boxed.is_none() => {
                    cube_ball_pieces(n - k - 1, *side, radius * radius - sq)
                }
                _ => {
                    let (lo, hi) = boxed.clone().expect("box-shaped");
                    vec![Piece::regular(lo[k], hi[k])]
                }
            }
        };
        let (mut p, w) = nested_rule(n, order, &sections);
        for x in p.chunks_exact_mut(n) {
            for (v, c) in x.iter_mut().zip(&self.center) {
                *v += c;
            }
        }
        Ok((p, w))
    }

    /// Nearest point of the body.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let y = self.local(x);
        let p = project_local(&self.shape, &y);
        p.iter().zip(&self.center).map(|(a, c)| a + c).collect()
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        let p = self.project(x);
        x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    /// `h(u) = max_{x ∈ body} ⟨x, u⟩`.
    pub fn support(&self, u: &[f64]) -> f64 {
        let c: f64 = u.iter().zip(&self.center).map(|(a, b)| a * b).sum();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        c + match &self.shape {
            Shape::Ball { radius } => radius * norm,
            Shape::Ellipsoid { axes } => u.iter().zip(axes).map(|(v, a)| (v * a).powi(2)).sum::<f64>().sqrt(),
            Shape::Simplex { side } => side * u.iter().cloned().fold(0.0, f64::max),
            Shape::CubeTruncatedByBall { side, radius } => {
                let x = box_ball_maximizer(u, side / 2.0, *radius);
                x.iter().zip(u).map(|(a, b)| a * b).sum()
            }
            _ => {
                let (lo, hi) = self.as_box().expect("box-shaped");
                u.iter().zip(lo.iter().zip(&hi)).map(|(v, (l, h))| (v * l).max(v * h)).sum()
            }
        }
    }

    /// Uniform sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim;
        let y = match &self.shape {
            Shape::Ball { radius } => ball_sample(rng, n, *radius),
            Shape::Ellipsoid { axes } => {
                let b = ball_sample(rng, n, 1.0);
                b.iter().zip(axes).map(|(v, a)| v * a).collect()
            }
            Shape::Simplex { side } => {
                let e: Vec<f64> = (0..=n).map(|_| -rng.random::<f64>().ln()).collect();
                let s: f64 = e.iter().sum();
                e[..n].iter().map(|v| side * v / s).collect()
            }
            Shape::CubeTruncatedByBall { side, radius } => loop {
                let h = side / 2.0;
                let cand: Vec<f64> = (0..n).map(|_| rng.random_range(-h..h)).collect();
                if cand.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                    break cand;
                }
            },
            _ => {
                let (lo, hi) = self.as_box().expect("box-shaped");
                lo.iter().zip(&hi).map(|(l, h)| l + (h - l) * rng.random::<f64>()).collect()
            }
        };
        y.iter().zip(&self.center).map(|(a, c)| a + c).collect()
    }
}

fn ball_sample<R: Rng + ?Sized>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rad = r * rng.random::<f64>().powf(1.0 / n as f64);
    g.iter().map(|v| v * rad / norm).collect()
}

/// Pieces of `[-m, m]`, `m = min(s/2, √ρ²)`, split where the remaining
/// `rest`-dimensional section of the cube∩ball changes structure.
fn cube_ball_pieces(rest: usize, side: f64, rho2: f64) -> Vec<Piece> {
    if rho2 <= 0.0 {
        return vec![];
    }
    let rho = rho2.sqrt();
    let h = side / 2.0;
    let m = h.min(rho);
    let curved = rho < h;
    let mut cuts: Vec<f64> = (1..=rest)
        .filter_map(|j| {
            let v = rho2 - j as f64 * h * h;
            (v > 0.0 && v.sqrt() < m).then(|| v.sqrt())
        })
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut bounds = vec![-m];
    bounds.extend(cuts.iter().rev().map(|c| -c));
    bounds.extend(cuts.iter().copied());
    bounds.push(m);
    bounds.dedup();
    let last = bounds.len() - 2;
    bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| Piece {
            lo: w[0],
            hi: w[1],
            lo_end: if curved && i == 0 { End::Sqrt } else { End::Regular },
            hi_end: if curved && i == last { End::Sqrt } else { End::Regular },
        })
        .collect()
}

/// Maximizer of `⟨x, u⟩` over `[-h, h]^n ∩ r·B`: `x(μ) = clamp(u/μ)` with the
/// smallest multiplier `μ ≥ 0` keeping `|x| ≤ r`.
fn box_ball_maximizer(u: &[f64], h: f64, r: f64) -> Vec<f64> {
    let at = |mu: f64| -> Vec<f64> {
        u.iter()
            .map(|v| if mu == 0.0 { h * v.signum() * (v.abs() > 0.0) as i32 as f64 } else { (v / mu).clamp(-h, h) })
            .collect()
    };
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let x0 = at(0.0);
    if norm(&x0) <= r {
        return x0;
    }
    let (mut lo, mut hi) = (0.0, norm(u) / r.max(1e-300) + 1.0);
    while norm(&at(hi)) > r {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm(&at(mid)) > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

fn project_local(shape: &Shape, y: &[f64]) -> Vec<f64> {
    match shape {
        Shape::Cube { side } => y.iter().map(|v| v.clamp(-side / 2.0, side / 2.0)).collect(),
        Shape::HalfspaceTruncation { side, offset } => y
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let hi = if i == 0 { (side / 2.0).min(*offset) } else { side / 2.0 };
                v.clamp(-side / 2.0, hi)
            })
            .collect(),
        Shape::Ball { radius } => project_ball(y, *radius),
        Shape::Ellipsoid { axes } => project_ellipsoid(y, axes),
        Shape::Simplex { side } => project_simplex(y, *side),
        Shape::CubeTruncatedByBall { side, radius } => {
            // x(μ) = clamp(y/(1+μ)) with the smallest multiplier μ ≥ 0 keeping |x| ≤ r.
            let h = side / 2.0;
            let at = |mu: f64| -> Vec<f64> { y.iter().map(|v| (v / (1.0 + mu)).clamp(-h, h)).collect() };
            let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x0 = at(0.0);
            if norm(&x0) <= *radius {
                return x0;
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            while norm(&at(hi)) > *radius {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if norm(&at(mid)) > *radius {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            at(hi)
        }
    }
}

fn project_ball(y: &[f64], r: f64) -> Vec<f64> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= r {
        y.to_vec()
    } else {
        y.iter().map(|v| v * r / norm).collect()
    }
}

fn project_ellipsoid(y: &[f64], axes: &[f64]) -> Vec<f64> {
    let inside: f64 = y.iter().zip(axes).map(|(v, a)| (v / a).powi(2)).sum();
    if inside <= 1.0 {
        return y.to_vec();
    }
    // x_i = a_i² y_i / (a_i² + λ), with λ solving Σ (a_i y_i / (a_i² + λ))² = 1.
    let phi = |l: f64| -> f64 { y.iter().zip(axes).map(|(v, a)| (a * v / (a * a + l)).powi(2)).sum::<f64>() - 1.0 };
    let (mut lo, mut hi) = (0.0, 1.0);
    while phi(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    y.iter().zip(axes).map(|(v, a)| a * a * v / (a * a + hi)).collect()
}

fn project_simplex(y: &[f64], s: f64) -> Vec<f64> {
    let clamped: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    if clamped.iter().sum::<f64>() <= s {
        return clamped;
    }
    // Projection onto {x ≥ 0, Σx = s} by the sort-and-threshold rule.
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, v) in u.iter().enumerate() {
        cum += v;
        let t = (cum - s) / (k as f64 + 1.0);
        if v - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

/// Membership of `x` in the midpoint body `(K + T)/2`, decided by alternating
/// projections between `K` and the reflected body `2x − T`.
pub fn in_midpoint_body(k: &Body, t: &Body, x: &[f64], tol: f64) -> bool {
    let two_x: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let refl = |z: &[f64]| -> Vec<f64> {
        let w: Vec<f64> = two_x.iter().zip(z).map(|(a, b)| a - b).collect();
        let p = t.project(&w);
        two_x.iter().zip(&p).map(|(a, b)| a - b).collect()
    };
    let mut z = x.to_vec();
    let mut gap = f64::INFINITY;
    for _ in 0..300 {
        let a = k.project(&z);
        let b = refl(&a);
        let g = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        if g < tol {
            return true;
        }
        if (gap - g).abs() < 1e-14 {
            break;
        }
        gap = g;
        z = b;
    }
    gap < tol
}

/// Area of a planar convex body from its support function sampled at
/// `m` directions (circumscribed polygon).
pub fn planar_area_from_support(h: impl Fn(&[f64]) -> f64, m: usize) -> f64 {
    let dirs: Vec<(f64, f64)> = (0..m).map(|i| (2.0 * PI * i as f64 / m as f64).sin_cos()).collect();
    let hs: Vec<f64> = dirs.iter().map(|(s, c)| h(&[*c, *s])).collect();
    let mut verts = Vec::with_capacity(m);
    for i in 0..m {
        let j = (i + 1) % m;
        let (s1, c1) = dirs[i];
        let (s2, c2) = dirs[j];
        // Intersect ⟨u_i, x⟩ = h_i and ⟨u_j, x⟩ = h_j.
        let det = c1 * s2 - s1 * c2;
        let x = (hs[i] * s2 - s1 * hs[j]) / det;
        let y = (c1 * hs[j] - hs[i] * c2) / det;
        verts.push((x, y));
    }
    let mut area = 0.0;
    for i in 0..m {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % m];
        area += x1 * y2 - x2 * y1;
    }
    0.5 * area.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn body(shape: Shape, n: usize) -> Body {
        BodySpec::new(shape).build(n).unwrap()
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(BodySpec::new(Shape::Cube { side: 0.0 }).build(2).is_err());
        assert!(matches!(
            BodySpec::new(Shape::Ellipsoid { axes: vec![1.0] }).build(2),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn closed_form_volumes_match_section_quadrature() {
        let shapes = [
            Shape::Cube { side: 1.3 },
            Shape::Ball { radius: 0.8 },
            Shape::Simplex { side: 2.0 },
            Shape::HalfspaceTruncation { side: 1.0, offset: 0.1 },
        ];
        for n in 1..=3 {
            for s in &shapes {
                let b = body(s.clone(), n);
                let (_, w) = b.section_rule(32).unwrap();
                let q: f64 = w.iter().sum();
                let v = b.volume().unwrap();
                assert!((q - v).abs() < 1e-9 * v, "{s:?} n={n}: {q} vs {v}");
            }
        }
        let e = body(Shape::Ellipsoid { axes: vec![0.5, 1.0, 2.0] }, 3);
        let (_, w) = e.section_rule(32).unwrap();
        assert!((w.iter().sum::<f64>() - e.volume().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ball_radius_for_unit_area_disc() {
        let r = 1.0 / PI.sqrt();
        let b = body(Shape::Ball { radius: r }, 2);
        assert!((b.volume().unwrap() - 1.0).abs() < 1e-14);
        assert!((r - 0.5642).abs() < 1e-4);
    }

    #[test]
    fn cube_ball_area_2d_matches_segment_formula() {
        // Square [-½,½]² cut by the disc of radius 0.6: four circular caps removed.
        let (s, r) = (1.0f64, 0.6f64);
        let b = body(Shape::CubeTruncatedByBall { side: s, radius: r }, 2);
        let d = s / 2.0;
        let cap = r * r * (d / r).acos() - d * (r * r - d * d).sqrt();
        let expected = PI * r * r - 4.0 * cap;
        let got = b.volume().unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn cube_ball_3d_volume_against_monte_carlo() {
        let b = body(Shape::CubeTruncatedByBall { side: 1.0, radius: 0.62 }, 3);
        let v = b.volume().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400_000;
        let hits = (0..n)
            .filter(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
                b.contains(&x)
            })
            .count();
        let mc = hits as f64 / n as f64;
        assert!((v - mc).abs() < 4.0 * (mc * (1.0 - mc) / n as f64).sqrt(), "{v} vs {mc}");
    }

    #[test]
    fn simplex_moments_match_sampling() {
        let b = body(Shape::Simplex { side: 1.0 }, 3);
        let (mean, cov) = b.moments().unwrap();
        let (p, w) = b.section_rule(16).unwrap();
        let vol: f64 = w.iter().sum();
        let m0: f64 = p.chunks_exact(3).zip(&w).map(|(x, w)| w * x[0]).sum::<f64>() / vol;
        let c01: f64 =
            p.chunks_exact(3).zip(&w).map(|(x, w)| w * (x[0] - m0) * (x[1] - m0)).sum::<f64>() / vol;
        assert!((mean[0] - m0).abs() < 1e-12);
        assert!((cov[(0, 1)] - c01).abs() < 1e-12);
    }

    #[test]
    fn projections_are_nearest_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shapes = [
            Shape::Cube { side: 1.0 },
            Shape::Ball { radius: 0.7 },
            Shape::Simplex { side: 1.0 },
            Shape::Ellipsoid { axes: vec![0.4, 1.1] },
            Shape::CubeTruncatedByBall { side: 1.0, radius: 0.6 },
        ];
        for s in shapes {
            let b = body(s.clone(), 2);
            for _ in 0..20 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p = b.project(&x);
                let d = b.distance(&x);
                // No sampled body point is closer.
                for _ in 0..200 {
                    let y = b.sample(&mut rng);
                    let dy = x.iter().zip(&y).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
                    assert!(dy >= d - 1e-6, "{s:?}");
                }
                let pi: Vec<f64> = p.iter().map(|v| v * (1.0 - 1e-9)).collect();
                assert!(b.contains(&pi) || b.distance(&pi) < 1e-6, "{s:?}");
            }
        }
    }

    #[test]
    fn support_of_cube_ball_matches_boundary_scan() {
        let b = body(Shape::CubeTruncatedByBall { side: 1.0, radius: 0.6 }, 2);
        for k in 0..16 {
            let th = 2.0 * PI * k as f64 / 16.0 + 0.1;
            let u = [th.cos(), th.sin()];
            let mut best = f64::NEG_INFINITY;
            for i in 0..=400 {
                for j in 0..=400 {
                    let x = [-0.5 + i as f64 / 400.0, -0.5 + j as f64 / 400.0];
                    if b.contains(&x) {
                        best = best.max(x[0] * u[0] + x[1] * u[1]);
                    }
                }
            }
            assert!((b.support(&u) - best).abs() < 5e-3);
            assert!(b.support(&u) >= best - 1e-12);
        }
    }

    #[test]
    fn midpoint_body_of_square_and_disc_steiner() {
        // (K + T)/2 with K the unit square and T the unit-area disc: Steiner's
        // formula gives 1/4 + perimeter(K/2)·ρ/2 + π(ρ/2)².
        let rho = 1.0 / PI.sqrt();
        let k = body(Shape::Cube { side: 1.0 }, 2);
        let t = body(Shape::Ball { radius: rho }, 2);
        let exact = 0.25 + 2.0 * rho / 2.0 + PI * (rho / 2.0).powi(2);
        let poly = planar_area_from_support(|u| 0.5 * (k.support(u) + t.support(u)), 2048);
        assert!((poly - exact).abs() < 1e-5, "{poly} vs {exact}");
        assert!(in_midpoint_body(&k, &t, &[0.0, 0.0], 1e-9));
        assert!(in_midpoint_body(&k, &t, &[0.25 + 0.27, 0.0], 1e-9));
        assert!(!in_midpoint_body(&k, &t, &[0.25 + 0.30, 0.0], 1e-9));
    }
}
