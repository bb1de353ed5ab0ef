//! Log-concave densities: builtin families, affine images, quadrature rules,
//! exact samplers and moment oracles.
//!
//! Every density is a *base* density in base coordinates `u` composed with an
//! affine map `x = L u + shift`, so isotropization never touches the base.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::geometry::{Body, BodySpec};
use crate::linalg::{check_floor, sym_eigen, sym_inv_sqrt, symmetrize};
use crate::points::PointMeasure;
use crate::quadrature::box_rule;

/// Largest dimension handled by grid quadrature.
pub const MAX_GRID_DIM: usize = 3;
/// Support edges this many standard deviations away are ignored when
/// placing quadrature windows.
const SUPPORT_CLEARANCE: f64 = 8.0;
pub const DEFAULT_ORDER: usize = 64;

/// Hard truncation radius `max(n, 10√n)` for builtin densities.
pub fn truncation_radius(n: usize) -> f64 {
    let n = n as f64;
    n.max(10.0 * n.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityKind {
    StandardGaussian,
    UniformBody,
    Product1d,
    Custom,
}

/// One-dimensional log-concave factors, each standardized to mean 0 and
/// variance 1 after truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor1d {
    Gaussian,
    Uniform,
    /// `Exp(1)` recentred and rescaled.
    Exponential,
}

/// Config-level description of a density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensitySpec {
    StandardGaussian,
    UniformBody(BodySpec),
    /// A single factor is repeated across all coordinates.
    Product1d { factors: Vec<Factor1d> },
}

/// A truncated, standardized 1D factor: raw variable on `[lo, hi]`, mapped by
/// `y = (x − mean)/sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: Factor1d,
    lo: f64,
    hi: f64,
    mean: f64,
    sd: f64,
    log_z: f64,
}

impl Factor {
    /// Truncate so the standardized support lies inside `[-t, t]`.
    pub fn new(kind: Factor1d, t: f64) -> Factor {
        match kind {
            Factor1d::Uniform => {
                let h = 3f64.sqrt();
                Factor { kind, lo: -h, hi: h, mean: 0.0, sd: 1.0, log_z: (2.0 * h).ln() }
            }
            Factor1d::Gaussian => {
                let moments = |u: f64| {
                    let z = erf(u / 2f64.sqrt());
                    let phi = (-0.5 * u * u).exp() / (2.0 * PI).sqrt();
                    (z, (1.0 - 2.0 * u * phi / z).sqrt())
                };
                let mut u = t;
                for _ in 0..60 {
                    u = t * moments(u).1;
                }
                let (z, sd) = moments(u);
                Factor { kind, lo: -u, hi: u, mean: 0.0, sd, log_z: z.ln() + 0.5 * (2.0 * PI).ln() }
            }
            Factor1d::Exponential => {
                let moments = |m: f64| {
                    let e = (-m).exp();
                    let z = 1.0 - e;
                    let m1 = (1.0 - (m + 1.0) * e) / z;
                    let m2 = (2.0 - (m * m + 2.0 * m + 2.0) * e) / z;
                    (z, m1, (m2 - m1 * m1).sqrt())
                };
                let mut m = t + 1.0;
                for _ in 0..60 {
                    let (_, m1, sd) = moments(m);
                    m = m1 + t * sd;
                }
                let (z, mean, sd) = moments(m);
                Factor { kind, lo: 0.0, hi: m, mean, sd, log_z: z.ln() }
            }
        }
    }

    /// Standardized support.
    pub fn support(&self) -> (f64, f64) {
        ((self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd)
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        let x = self.mean + self.sd * y;
        if x < self.lo || x > self.hi {
            return f64::NEG_INFINITY;
        }
        let raw = match self.kind {
            Factor1d::Uniform => 0.0,
            Factor1d::Gaussian => -0.5 * x * x,
            Factor1d::Exponential => -x,
        };
        raw - self.log_z + self.sd.ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = match self.kind {
            Factor1d::Uniform => self.lo + (self.hi - self.lo) * rng.random::<f64>(),
            Factor1d::Gaussian => loop {
                let v: f64 = StandardNormal.sample(rng);
                if v.abs() <= self.hi {
                    break v;
                }
            },
            Factor1d::Exponential => {
                let u: f64 = rng.random();
                -(1.0 - u * (1.0 - (-self.hi).exp())).ln()
            }
        };
        (x - self.mean) / self.sd
    }
}

pub type LogFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Density in base coordinates.
#[derive(Clone)]
pub enum Base {
    /// Standard Gaussian truncated to the ball of radius `radius`.
    StandardGaussian { radius: f64, log_z: f64, var: f64 },
    Body { body: Body, log_vol: f64 },
    Product(Vec<Factor>),
    /// `exp(⟨c,x⟩ − ½⟨Bx,x⟩ − log V) · inner(x)`.
    Tilted { inner: Arc<LogDensity>, c: DVector<f64>, b: DMatrix<f64>, log_v: f64 },
    Custom { log_eval: LogFn, radius: f64 },
}

impl fmt::Debug for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Base::StandardGaussian { radius, .. } => write!(f, "StandardGaussian(R={radius})"),
            Base::Body { body, .. } => write!(f, "Body({:?})", body.shape),
            Base::Product(fs) => write!(f, "Product({:?})", fs.iter().map(|x| x.kind).collect::<Vec<_>>()),
            Base::Tilted { inner, .. } => write!(f, "Tilted({:?})", inner.base),
            Base::Custom { radius, .. } => write!(f, "Custom(R={radius})"),
        }
    }
}

/// The affine map `x ↦ lin·x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub lin: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl Affine {
    pub fn identity(n: usize) -> Self {
        Affine { lin: DMatrix::identity(n, n), shift: DVector::zeros(n) }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.lin * DVector::from_column_slice(x) + &self.shift).iter().copied().collect()
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Affine) -> Affine {
        Affine { lin: &self.lin * &other.lin, shift: &self.lin * &other.shift + &self.shift }
    }

    /// Largest entrywise difference from another map.
    pub fn distance(&self, other: &Affine) -> f64 {
        let l = (&self.lin - &other.lin).amax();
        let s = (&self.shift - &other.shift).amax();
        l.max(s)
    }
}

/// Mass, barycenter and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub mass: f64,
    pub barycenter: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// A log-concave density `f(x) = base(L⁻¹(x − shift)) / |det L|`.
#[derive(Debug, Clone)]
pub struct LogDensity {
    pub dim: usize,
    pub base: Base,
    pub map: Affine,
    lin_inv: DMatrix<f64>,
    log_det: f64,
    /// Mass removed by truncation before renormalization.
    pub truncated_mass: f64,
}

impl LogDensity {
    fn from_base(dim: usize, base: Base, truncated_mass: f64) -> Self {
        LogDensity {
            dim,
            base,
            map: Affine::identity(dim),
            lin_inv: DMatrix::identity(dim, dim),
            log_det: 0.0,
            truncated_mass,
        }
    }

    /// Custom density; `radius` must bound its support.
    pub fn custom(dim: usize, radius: f64, log_eval: LogFn) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSpec("dimension must be at least 1".into()));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidSpec(format!("support radius must be positive, got {radius}")));
        }
        Ok(Self::from_base(dim, Base::Custom { log_eval, radius }, 0.0))
    }

    /// `V⁻¹ e^{⟨c,x⟩ − ½⟨Bx,x⟩} inner(x)`, with `log_v` the log normalizer.
    pub fn tilted(inner: &LogDensity, c: DVector<f64>, b: DMatrix<f64>, log_v: f64) -> Self {
        let base = Base::Tilted { inner: Arc::new(inner.clone()), c, b, log_v };
        Self::from_base(inner.dim, base, 0.0)
    }

    pub fn kind(&self) -> DensityKind {
        match self.base {
            Base::StandardGaussian { .. } => DensityKind::StandardGaussian,
            Base::Body { .. } => DensityKind::UniformBody,
            Base::Product(_) => DensityKind::Product1d,
            Base::Tilted { .. } | Base::Custom { .. } => DensityKind::Custom,
        }
    }

    /// Push the density forward by an affine map.
    pub fn transformed(&self, m: &Affine) -> Result<LogDensity> {
        if m.lin.nrows() != self.dim || m.shift.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: m.shift.len() });
        }
        let map = m.compose(&self.map);
        let lin_inv = map
            .lin
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularCovariance { min_eig: 0.0 })?;
        let log_det = map.lin.determinant().abs().ln();
        Ok(LogDensity { map, lin_inv, log_det, ..self.clone() })
    }

    pub fn to_base(&self, x: &[f64]) -> Vec<f64> {
        let d = DVector::from_column_slice(x) - &self.map.shift;
        (&self.lin_inv * d).iter().copied().collect()
    }

    fn base_radius(&self) -> f64 {
        match &self.base {
            Base::StandardGaussian { radius, .. } => *radius,
            Base::Body { body, .. } => body.radius(),
            Base::Product(fs) => {
                fs.iter().map(|f| f.support().0.abs().max(f.support().1.abs()).powi(2)).sum::<f64>().sqrt()
            }
            Base::Tilted { inner, .. } => inner.support_radius(),
            Base::Custom { radius, .. } => *radius,
        }
    }

    /// Radius of a centered ball containing the support.
    pub fn support_radius(&self) -> f64 {
        let op = self.map.lin.clone().singular_values().max();
        op * self.base_radius() + self.map.shift.norm()
    }

    pub fn base_log_eval(&self, u: &[f64]) -> f64 {
        match &self.base {
            Base::StandardGaussian { radius, log_z, .. } => {
                let sq: f64 = u.iter().map(|v| v * v).sum();
                if sq > radius * radius {
                    f64::NEG_INFINITY
                } else {
                    -0.5 * sq - 0.5 * self.dim as f64 * (2.0 * PI).ln() - log_z
                }
            }
            Base::Body { body, log_vol } => {
                if body.contains(u) {
                    -log_vol
                } else {
                    f64::NEG_INFINITY
                }
            }
            Base::Product(fs) => fs.iter().zip(u).map(|(f, y)| f.log_pdf(*y)).sum(),
            Base::Tilted { inner, c, b, log_v } => {
                let li = inner.log_eval(u);
                if li == f64::NEG_INFINITY {
                    return li;
                }
                tilt_exponent(c, b, u) - log_v + li
            }
            Base::Custom { log_eval, .. } => log_eval(u),
        }
    }

    pub fn log_eval(&self, x: &[f64]) -> f64 {
        self.base_log_eval(&self.to_base(x)) - self.log_det
    }

    pub fn has_sampler(&self) -> bool {
        !matches!(self.base, Base::Tilted { .. } | Base::Custom { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let n = self.dim;
        let u = match &self.base {
            Base::StandardGaussian { radius, .. } => loop {
                let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                if g.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                    break g;
                }
            },
            Base::Body { body, .. } => body.sample(rng),
            Base::Product(fs) => fs.iter().map(|f| f.sample(rng)).collect(),
            _ => return Err(Error::NoSampler),
        };
        Ok(self.map.apply(&u))
    }

    /// `count` exact samples, row-major.
    pub fn sample_many(&self, count: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            out.extend(self.sample(&mut rng)?);
        }
        Ok(out)
    }

    /// Support box in base coordinates, when the base lives on a box.
    pub fn base_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.base {
            Base::StandardGaussian { radius, .. } => Some((vec![-radius; self.dim], vec![*radius; self.dim])),
            Base::Body { body, .. } => body.as_box().map(|(lo, hi)| {
                let lo = lo.iter().zip(&body.center).map(|(a, c)| a + c).collect();
                let hi = hi.iter().zip(&body.center).map(|(a, c)| a + c).collect();
                (lo, hi)
            }),
            Base::Product(fs) => Some(fs.iter().map(|f| f.support()).unzip()),
            Base::Custom { radius, .. } => Some((vec![-radius; self.dim], vec![*radius; self.dim])),
            Base::Tilted { .. } => None,
        }
    }

    /// Integration nodes and volume weights in base coordinates.
    fn base_nodes(&self, order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.dim > MAX_GRID_DIM {
            return Err(Error::QuadratureDimensionTooHigh { dim: self.dim, max: MAX_GRID_DIM });
        }
        match &self.base {
            Base::Body { body, .. } => body.section_rule(order),
            Base::Tilted { inner, .. } => inner.global_nodes(order),
            _ => {
                let (lo, hi) = self.base_box().expect("box-supported base");
                Ok(box_rule(&lo, &hi, order))
            }
        }
    }

    fn global_nodes(&self, order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (u, w) = self.base_nodes(order)?;
        let pm = PointMeasure { dim: self.dim, points: u, log_w: vec![0.0; w.len()] };
        let pushed = pm.push_forward(&self.map.lin, &self.map.shift);
        let jac = self.log_det.exp();
        Ok((pushed.points, w.iter().map(|w| w * jac).collect()))
    }

    /// Quadrature measure for `f` in global coordinates; log-weights include
    /// `log f`.
    pub fn rule(&self, order: usize) -> Result<PointMeasure> {
        let (u, w) = self.base_nodes(order)?;
        let pm = PointMeasure::from_rule(self.dim, &u, &w, |v| self.base_log_eval(v));
        Ok(pm.push_forward(&self.map.lin, &self.map.shift))
    }

    /// Quadrature on the box `[lo, hi]` (base coordinates) intersected with
    /// the base support box.
    pub fn box_window_rule(&self, lo: &[f64], hi: &[f64], order: usize) -> Result<Option<PointMeasure>> {
        if self.dim > MAX_GRID_DIM {
            return Err(Error::QuadratureDimensionTooHigh { dim: self.dim, max: MAX_GRID_DIM });
        }
        let Some((blo, bhi)) = self.base_box() else { return Ok(None) };
        let wlo: Vec<f64> = lo.iter().zip(&blo).map(|(a, b)| a.max(*b)).collect();
        let whi: Vec<f64> = hi.iter().zip(&bhi).map(|(a, b)| a.min(*b)).collect();
        if wlo.iter().zip(&whi).any(|(l, h)| !(h > l)) {
            return Ok(None);
        }
        let (u, w) = box_rule(&wlo, &whi, order);
        let pm = PointMeasure::from_rule(self.dim, &u, &w, |v| self.base_log_eval(v));
        Ok(Some(pm.push_forward(&self.map.lin, &self.map.shift)))
    }

    /// Rule on the parallelotope `center + frame·[-half, half]^n` (global
    /// coordinates), or `None` if it leaves the base support box.
    pub fn frame_window_rule(
        &self,
        center: &DVector<f64>,
        frame: &DMatrix<f64>,
        half: f64,
        order: usize,
    ) -> Result<Option<PointMeasure>> {
        let n = self.dim;
        if n > MAX_GRID_DIM {
            return Err(Error::QuadratureDimensionTooHigh { dim: n, max: MAX_GRID_DIM });
        }
        let Some((blo, bhi)) = self.base_box() else { return Ok(None) };
        let fits = (0..(1usize << n)).all(|corner| {
            let z = DVector::from_fn(n, |i, _| if corner >> i & 1 == 1 { half } else { -half });
            let u = self.to_base((center + frame * z).as_slice());
            u.iter().zip(blo.iter().zip(&bhi)).all(|(v, (l, h))| v >= l && v <= h)
        });
        if !fits && self.clearance(center, frame, &blo, &bhi) < SUPPORT_CLEARANCE {
            return Ok(None);
        }
        let (z, w) = box_rule(&vec![-half; n], &vec![half; n], order);
        let jac = frame.determinant().abs();
        let pm = PointMeasure { dim: n, points: z, log_w: vec![0.0; w.len()] }.push_forward(frame, center);
        let weights: Vec<f64> = w.iter().map(|w| w * jac).collect();
        Ok(Some(PointMeasure::from_rule(n, &pm.points, &weights, |x| self.log_eval(x))))
    }

    /// Distance from `center` to the edge of the support in units of the
    /// spread `frame·frameᵀ`; the box faces are checked, and the ball for a
    /// truncated Gaussian.
    fn clearance(&self, center: &DVector<f64>, frame: &DMatrix<f64>, blo: &[f64], bhi: &[f64]) -> f64 {
        let u = self.to_base(center.as_slice());
        let cov = &self.lin_inv * frame * frame.transpose() * self.lin_inv.transpose();
        let mut d = f64::INFINITY;
        for i in 0..self.dim {
            let sd = cov[(i, i)].max(0.0).sqrt();
            d = d.min((u[i] - blo[i]) / sd).min((bhi[i] - u[i]) / sd);
        }
        if let Base::StandardGaussian { radius, .. } = self.base {
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            d = d.min((radius - norm) / sym_eigen(&cov).max().max(0.0).sqrt());
        }
        d
    }

    /// The halfspace `{⟨ν,x⟩ < offset}` as a coordinate halfspace of the base
    /// variable, `(axis, bound, upper)` meaning `u_axis < bound` if `upper`
    /// and `u_axis > bound` otherwise. `None` if it is not axis-aligned there.
    pub fn base_halfspace(&self, normal: &DVector<f64>, offset: f64) -> Option<(usize, f64, bool)> {
        let w = self.map.lin.transpose() * normal;
        let off = offset - normal.dot(&self.map.shift);
        let (k, wk) = w.iter().copied().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
        if wk == 0.0 || w.iter().enumerate().any(|(i, v)| i != k && v.abs() > 1e-12 * wk.abs()) {
            return None;
        }
        Some((k, off / wk, wk > 0.0))
    }

    /// Composite rule over the support box cut along every base axis at the
    /// base image of `at`, so integrands with a kink at `at` stay accurate.
    /// `None` when the base does not live on a box.
    pub fn split_rule(&self, at: &[f64], order: usize) -> Result<Option<PointMeasure>> {
        if matches!(self.base, Base::Tilted { .. }) {
            return Ok(None);
        }
        let Some((lo, hi)) = self.base_box() else { return Ok(None) };
        let u = self.to_base(at);
        let n = self.dim;
        let mut out = PointMeasure { dim: n, points: Vec::new(), log_w: Vec::new() };
        for corner in 0..(1usize << n) {
            let mut sl = lo.clone();
            let mut sh = hi.clone();
            let mut empty = false;
            for i in 0..n {
                let cut = u[i].clamp(lo[i], hi[i]);
                if corner >> i & 1 == 0 {
                    sh[i] = cut;
                } else {
                    sl[i] = cut;
                }
                empty |= !(sh[i] > sl[i]);
            }
            if empty {
                continue;
            }
            if let Some(pm) = self.box_window_rule(&sl, &sh, order)? {
                out.points.extend(pm.points);
                out.log_w.extend(pm.log_w);
            }
        }
        Ok(Some(out))
    }

    /// Window of `±width` standard deviations around a global mean and
    /// covariance, expressed in base coordinates, each half-width at least
    /// `floor`.
    pub fn base_window(&self, mean: &DVector<f64>, cov: &DMatrix<f64>, width: f64, floor: f64) -> (Vec<f64>, Vec<f64>) {
        let m = &self.lin_inv * (mean - &self.map.shift);
        let c = &self.lin_inv * cov * self.lin_inv.transpose();
        let half: Vec<f64> = (0..self.dim).map(|i| (width * c[(i, i)].max(0.0).sqrt()).max(floor)).collect();
        let lo = (0..self.dim).map(|i| m[i] - half[i]).collect();
        let hi = (0..self.dim).map(|i| m[i] + half[i]).collect();
        (lo, hi)
    }

    /// Mean and covariance of the untruncated Gaussian this density
    /// represents, if it is one.
    pub fn gaussian_params(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        match self.base {
            Base::StandardGaussian { .. } => {
                Some((self.map.shift.clone(), symmetrize(&(&self.map.lin * self.map.lin.transpose()))))
            }
            _ => None,
        }
    }

    /// Uniform body in global coordinates, when the map is a positive scalar
    /// multiple of the identity plus a shift.
    pub fn as_uniform_body(&self) -> Option<Body> {
        let Base::Body { body, .. } = &self.base else { return None };
        let s = self.map.lin[(0, 0)];
        let scalar = DMatrix::identity(self.dim, self.dim) * s;
        if !(s > 0.0) || (&self.map.lin - scalar).amax() > 1e-14 * s {
            return None;
        }
        let shape = body.shape.scaled(s);
        let center = body.center.iter().zip(self.map.shift.iter()).map(|(c, t)| s * c + t).collect();
        Some(Body { dim: self.dim, shape, center })
    }
}

pub fn tilt_exponent(c: &DVector<f64>, b: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let (c, b) = (&c.as_slice()[..n], &b.as_slice()[..n * n]);
    let mut lin = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        lin += c[i] * x[i];
        let mut row = 0.0;
        for (j, xj) in x.iter().enumerate() {
            row += b[j * n + i] * xj;
        }
        quad += x[i] * row;
    }
    lin - 0.5 * quad
}

/// Build a builtin density in dimension `dim`.
pub fn make_density(spec: &DensitySpec, dim: usize) -> Result<LogDensity> {
    if dim == 0 {
        return Err(Error::InvalidSpec("dimension must be at least 1".into()));
    }
    let r = truncation_radius(dim);
    match spec {
        DensitySpec::StandardGaussian => {
            let h = dim as f64 / 2.0;
            let z = gamma_lr(h, r * r / 2.0);
            let var = gamma_lr(h + 1.0, r * r / 2.0) / z;
            Ok(LogDensity::from_base(dim, Base::StandardGaussian { radius: r, log_z: z.ln(), var }, 1.0 - z))
        }
        DensitySpec::UniformBody(b) => {
            let body = b.build(dim)?;
            let vol = body.volume()?;
            Ok(LogDensity::from_base(dim, Base::Body { body, log_vol: vol.ln() }, 0.0))
        }
        DensitySpec::Product1d { factors } => {
            let kinds: Vec<Factor1d> = match factors.len() {
                0 => return Err(Error::InvalidSpec("product density needs at least one factor".into())),
                1 => vec![factors[0]; dim],
                k if k == dim => factors.clone(),
                k => return Err(Error::DimensionMismatch { expected: dim, got: k }),
            };
            let t = r / (dim as f64).sqrt();
            let fs: Vec<Factor> = kinds.iter().map(|k| Factor::new(*k, t)).collect();
            let kept: f64 = fs
                .iter()
                .map(|f| match f.kind {
                    Factor1d::Uniform => 1.0,
                    Factor1d::Gaussian => f.log_z.exp() / (2.0 * PI).sqrt(),
                    Factor1d::Exponential => f.log_z.exp(),
                })
                .product();
            Ok(LogDensity::from_base(dim, Base::Product(fs), 1.0 - kept))
        }
    }
}

/// Closed-form moments where available, grid quadrature otherwise.
pub fn exact_moments(f: &LogDensity) -> Result<MomentSummary> {
    let n = f.dim;
    let base = match &f.base {
        Base::StandardGaussian { var, .. } => Some((DVector::zeros(n), DMatrix::identity(n, n) * *var)),
        Base::Body { body, .. } => Some(body.moments()?),
        Base::Product(_) => Some((DVector::zeros(n), DMatrix::identity(n, n))),
        _ => None,
    };
    if let Base::Tilted { inner, c, b, log_v } = &f.base {
        let s = crate::tilt::TiltState { t: 0.0, c: c.clone(), b: b.clone() };
        let m = crate::tilt::tilted_moments(inner, &s, &crate::tilt::default_strategy(inner))?;
        let l = &f.map.lin;
        return Ok(MomentSummary {
            mass: (m.log_v - log_v).exp(),
            barycenter: l * m.a + &f.map.shift,
            covariance: symmetrize(&(l * m.cov * l.transpose())),
        });
    }
    if let Some((m, c)) = base {
        let l = &f.map.lin;
        return Ok(MomentSummary {
            mass: 1.0,
            barycenter: l * m + &f.map.shift,
            covariance: symmetrize(&(l * c * l.transpose())),
        });
    }
    let rule = f.rule(DEFAULT_ORDER)?;
    let raw = rule.moments()?;
    let mass = raw.log_mass.exp();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::NonNormalizable(mass));
    }
    Ok(MomentSummary { mass, barycenter: raw.mean, covariance: raw.cov })
}

/// Affine image with barycenter 0 and covariance Id, and the map used.
pub fn isotropize(f: &LogDensity, moments: &MomentSummary) -> Result<(LogDensity, Affine)> {
    if check_floor(&moments.covariance).is_err() {
        return Err(Error::SingularCovariance { min_eig: sym_eigen(&moments.covariance).min() });
    }
    let m = sym_inv_sqrt(&moments.covariance);
    let shift = -(&m * &moments.barycenter);
    let map = Affine { lin: m, shift };
    Ok((f.transformed(&map)?, map))
}

/// Convenience: build and isotropize.
pub fn make_isotropic(spec: &DensitySpec, dim: usize) -> Result<LogDensity> {
    let f = make_density(spec, dim)?;
    let m = exact_moments(&f)?;
    Ok(isotropize(&f, &m)?.0)
}

/// Statistical log-concavity check along random chords.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcavityReport {
    pub triples: usize,
    pub worst_violation: f64,
    pub passed: bool,
}

pub fn check_log_concavity(f: &LogDensity, triples: usize, tol: f64, seed: u64) -> Result<ConcavityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = f.support_radius();
    let draw = |rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        if f.has_sampler() {
            return f.sample(rng);
        }
        for _ in 0..100_000 {
            let x: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-r..r)).collect();
            if f.log_eval(&x).is_finite() {
                return Ok(x);
            }
        }
        Err(Error::NoSampler)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..triples {
        let x = draw(&mut rng)?;
        let y = draw(&mut rng)?;
        let lam: f64 = rng.random();
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let rhs = lam * f.log_eval(&x) + (1.0 - lam) * f.log_eval(&y);
        let lhs = f.log_eval(&z);
        worst = worst.max(rhs - lhs);
    }
    Ok(ConcavityReport { triples, worst_violation: worst, passed: worst <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;
    use crate::linalg::op_norm_sym;
    use proptest::prelude::*;

    fn exp_product(n: usize) -> LogDensity {
        make_density(&DensitySpec::Product1d { factors: vec![Factor1d::Exponential] }, n).unwrap()
    }

    fn cube(side: f64) -> DensitySpec {
        DensitySpec::UniformBody(BodySpec::new(Shape::Cube { side }))
    }

    fn battery(n: usize) -> Vec<LogDensity> {
        let mut out = vec![
            make_density(&DensitySpec::StandardGaussian, n).unwrap(),
            make_density(&cube(1.0), n).unwrap(),
            make_density(&DensitySpec::UniformBody(BodySpec::new(Shape::Ball { radius: 1.0 })), n).unwrap(),
            make_density(&DensitySpec::UniformBody(BodySpec::new(Shape::Simplex { side: 1.0 })), n).unwrap(),
            exp_product(n),
            make_density(
                &DensitySpec::Product1d { factors: vec![Factor1d::Uniform, Factor1d::Gaussian, Factor1d::Exponential][..n].to_vec() },
                n,
            )
            .unwrap(),
        ];
        if n >= 2 {
            out.push(
                make_density(
                    &DensitySpec::UniformBody(BodySpec::new(Shape::CubeTruncatedByBall { side: 1.0, radius: 0.6 })),
                    n,
                )
                .unwrap(),
            );
        }
        out
    }

    #[test]
    fn gaussian_normalization_at_origin() {
        let f = make_density(&DensitySpec::StandardGaussian, 1).unwrap();
        assert!((f.log_eval(&[0.0]) + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!(f.truncated_mass < 1e-20);
    }

    #[test]
    fn unit_cube_indicator() {
        let f = make_density(&cube(1.0), 2).unwrap();
        assert_eq!(f.log_eval(&[0.1, -0.4]), 0.0);
        assert_eq!(f.log_eval(&[0.6, 0.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(make_density(&cube(-1.0), 2), Err(Error::InvalidSpec(_))));
        assert!(matches!(make_density(&DensitySpec::StandardGaussian, 0), Err(Error::InvalidSpec(_))));
        let bad = DensitySpec::Product1d { factors: vec![Factor1d::Gaussian; 2] };
        assert!(matches!(make_density(&bad, 3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn uniform_interval_isotropization() {
        let spec = DensitySpec::UniformBody(BodySpec { shape: Shape::Cube { side: 1.0 }, center: Some(vec![0.5]) });
        let f = make_density(&spec, 1).unwrap();
        let m = exact_moments(&f).unwrap();
        assert!((m.barycenter[0] - 0.5).abs() < 1e-15);
        assert!((m.covariance[(0, 0)] - 1.0 / 12.0).abs() < 1e-15);
        let (_, map) = isotropize(&f, &m).unwrap();
        assert!((map.lin[(0, 0)] - 12f64.sqrt()).abs() < 1e-12);
        assert!((map.shift[0] + 0.5 * 12f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unit_cube_3d_scales_by_sqrt12() {
        let f = make_density(&cube(1.0), 3).unwrap();
        let (_, map) = isotropize(&f, &exact_moments(&f).unwrap()).unwrap();
        let expect = DMatrix::identity(3, 3) * 12f64.sqrt();
        assert!((map.lin - expect).amax() < 1e-12);
        assert!(map.shift.amax() < 1e-15);
    }

    #[test]
    fn gaussian_isotropization_is_identity() {
        let f = make_density(&DensitySpec::StandardGaussian, 5).unwrap();
        let m = exact_moments(&f).unwrap();
        assert!((m.covariance.clone() - DMatrix::identity(5, 5)).amax() < 1e-12);
        let (_, map) = isotropize(&f, &m).unwrap();
        assert!(map.distance(&Affine::identity(5)) < 1e-12);
    }

    #[test]
    fn exponential_factor_standardized() {
        let f = exp_product(1);
        let rule = f.rule(DEFAULT_ORDER).unwrap();
        let r = rule.moments().unwrap();
        assert!(r.log_mass.abs() < 1e-12);
        assert!(r.mean[0].abs() < 1e-12);
        assert!((r.cov[(0, 0)] - 1.0).abs() < 1e-12);
        // Truncated raw moments E x^k = (k! − e^{-M} Σ_j k!/j! M^j) / (1 − e^{-M}).
        let fac = &f_factor(&f);
        let big_m = fac.hi;
        let raw = |k: i32| {
            let kf: f64 = (1..=k).map(f64::from).product();
            let tail: f64 = (0..=k).map(|j| kf / (1..=j).map(f64::from).product::<f64>() * big_m.powi(j)).sum();
            (kf - (-big_m).exp() * tail) / (1.0 - (-big_m).exp())
        };
        let (m1, m2, m3) = (raw(1), raw(2), raw(3));
        let central3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
        let expected = central3 / (m2 - m1 * m1).powf(1.5);
        let got = rule.expect(|x| x[0].powi(3)).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        assert!((got - 2.0).abs() < 0.02);
    }

    #[test]
    fn quadrature_matches_closed_form_on_battery() {
        for n in 1..=3 {
            for f in battery(n) {
                let f = make_isotropic_from(&f);
                let exact = exact_moments(&f).unwrap();
                let q = f.rule(DEFAULT_ORDER).unwrap().moments().unwrap();
                let scale = 1.0 + exact.covariance.amax();
                assert!(q.log_mass.abs() < 1e-6, "{:?} n={n}: mass {}", f.base, q.log_mass.exp());
                assert!((q.mean.clone() - &exact.barycenter).amax() < 1e-6 * scale, "{:?}", f.base);
                assert!((q.cov.clone() - &exact.covariance).amax() < 1e-6 * scale, "{:?}", f.base);
            }
        }
    }

    fn f_factor(f: &LogDensity) -> Factor {
        match &f.base {
            Base::Product(fs) => fs[0].clone(),
            _ => unreachable!(),
        }
    }

    fn make_isotropic_from(f: &LogDensity) -> LogDensity {
        isotropize(f, &exact_moments(f).unwrap()).unwrap().0
    }

    #[test]
    fn isotropize_is_idempotent() {
        for n in 1..=3 {
            for f in battery(n) {
                let g = make_isotropic_from(&f);
                let (_, second) = isotropize(&g, &exact_moments(&g).unwrap()).unwrap();
                assert!(second.distance(&Affine::identity(n)) < 1e-8, "{:?}", f.base);
            }
        }
    }

    #[test]
    fn support_radius_respects_truncation() {
        for n in [1usize, 2, 3, 5, 10] {
            let r = truncation_radius(n);
            let g = make_density(&DensitySpec::StandardGaussian, n).unwrap();
            assert!(g.support_radius() <= r * (1.0 + 1e-12));
            let e = exp_product(n);
            assert!(e.support_radius() <= r * (1.0 + 1e-9), "{} vs {r}", e.support_radius());
        }
    }

    #[test]
    fn log_eval_vanishes_outside_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=3 {
            for f in battery(n) {
                let f = make_isotropic_from(&f);
                let r = 1.01 * f.support_radius();
                for _ in 0..200 {
                    let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = g.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                    let x: Vec<f64> = g.iter().map(|v| v * r / norm).collect();
                    assert_eq!(f.log_eval(&x), f64::NEG_INFINITY);
                }
            }
        }
    }

    #[test]
    fn builtins_are_log_concave() {
        for n in 1..=3 {
            for f in battery(n) {
                let rep = check_log_concavity(&f, 1000, 1e-9, 5).unwrap();
                assert!(rep.passed, "{:?}: {}", f.base, rep.worst_violation);
            }
        }
    }

    #[test]
    fn log_concavity_check_flags_bimodal_mixture() {
        let lf: LogFn = Arc::new(|x: &[f64]| {
            let a = (-0.5 * (x[0] - 3.0).powi(2)).exp();
            let b = (-0.5 * (x[0] + 3.0).powi(2)).exp();
            if x[0].abs() > 10.0 {
                f64::NEG_INFINITY
            } else {
                (0.5 * (a + b) / (2.0 * PI).sqrt()).ln()
            }
        });
        let f = LogDensity::custom(1, 10.0, lf).unwrap();
        let rep = check_log_concavity(&f, 1000, 1e-9, 2).unwrap();
        assert!(!rep.passed);
        assert!(matches!(f.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::NoSampler)));
        let m = exact_moments(&f).unwrap();
        assert!((m.mass - 1.0).abs() < 1e-8);
        assert!((m.covariance[(0, 0)] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn custom_rejects_dimension_above_grid_limit() {
        let lf: LogFn = Arc::new(|_| 0.0);
        let f = LogDensity::custom(4, 1.0, lf).unwrap();
        assert!(matches!(exact_moments(&f), Err(Error::QuadratureDimensionTooHigh { dim: 4, max: 3 })));
    }

    #[test]
    fn singular_covariance_rejected() {
        let f = make_density(&DensitySpec::StandardGaussian, 2).unwrap();
        let m = MomentSummary {
            mass: 1.0,
            barycenter: DVector::zeros(2),
            covariance: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        };
        assert!(matches!(isotropize(&f, &m), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn samplers_match_exact_moments() {
        for n in 1..=3 {
            for f in battery(n) {
                let f = make_isotropic_from(&f);
                let s = f.sample_many(40_000, 11).unwrap();
                let r = PointMeasure::from_samples(n, s).moments().unwrap();
                assert!(r.mean.amax() < 0.05, "{:?}", f.base);
                let dev = op_norm_sym(&(r.cov - DMatrix::identity(n, n)));
                assert!(dev < 0.06, "{:?}: {dev}", f.base);
            }
        }
    }

    #[test]
    fn uniform_body_view_after_scaling() {
        let f = make_isotropic_from(&make_density(&cube(1.0), 2).unwrap());
        let b = f.as_uniform_body().unwrap();
        assert!((b.volume().unwrap() - 12.0).abs() < 1e-12);
        let g = make_density(&DensitySpec::StandardGaussian, 2).unwrap();
        assert!(g.as_uniform_body().is_none());
    }

    proptest! {
        #[test]
        fn affine_image_integrates_to_one(a in 0.3f64..3.0, b in -1.0f64..1.0, s in -2.0f64..2.0) {
            let f = make_density(&cube(1.0), 2).unwrap();
            let map = Affine {
                lin: DMatrix::from_row_slice(2, 2, &[a, b, 0.0, 1.0 / a]),
                shift: DVector::from_vec(vec![s, -s]),
            };
            let g = f.transformed(&map).unwrap();
            let r = g.rule(16).unwrap().moments().unwrap();
            prop_assert!(r.log_mass.abs() < 1e-10);
            let m = exact_moments(&g).unwrap();
            prop_assert!((r.cov - m.covariance).amax() < 1e-10);
        }
    }
}
