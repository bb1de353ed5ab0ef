//! Tilted mass, barycenter and covariance `(V, a, A)` of
//! `e^{⟨c,x⟩ − ½⟨Bx,x⟩} f(x)` under interchangeable strategies.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_floor, symmetrize};
use crate::measures::{tilt_exponent, LogDensity, DEFAULT_ORDER, MAX_GRID_DIM};
use crate::points::PointMeasure;

/// Standard deviations covered by a quadrature window.
pub const WINDOW_WIDTH: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TiltState {
    pub t: f64,
    pub c: DVector<f64>,
    pub b: DMatrix<f64>,
}

impl TiltState {
    pub fn zero(n: usize) -> Self {
        TiltState { t: 0.0, c: DVector::zeros(n), b: DMatrix::zeros(n, n) }
    }

    pub fn exponent(&self, x: &[f64]) -> f64 {
        tilt_exponent(&self.c, &self.b, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltedMoments {
    pub log_v: f64,
    pub a: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Effective node count; infinite for closed forms.
    pub n_eff: f64,
}

impl TiltedMoments {
    pub fn v(&self) -> f64 {
        self.log_v.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MomentStrategy {
    ClosedFormGaussian,
    GridQuadrature {
        #[serde(default = "default_order")]
        order: usize,
    },
    ParticleWeights { particles: usize, seed: u64 },
}

fn default_order() -> usize {
    DEFAULT_ORDER
}

impl MomentStrategy {
    pub fn grid() -> Self {
        MomentStrategy::GridQuadrature { order: DEFAULT_ORDER }
    }
}

/// Prepared evaluator for one density and strategy.
pub struct Tilter {
    f: Arc<LogDensity>,
    kind: Prepared,
}

enum Prepared {
    Gaussian { mean: DVector<f64>, prec: DMatrix<f64>, cov: DMatrix<f64>, prec_mean: DVector<f64> },
    Grid { order: usize, global: PointMeasure, windowed: bool },
    Particles(PointMeasure),
}

impl Tilter {
    pub fn new(f: Arc<LogDensity>, strategy: &MomentStrategy) -> Result<Self> {
        let kind = match strategy {
            MomentStrategy::ClosedFormGaussian => {
                let (mean, cov) = f.gaussian_params().ok_or_else(|| {
                    Error::StrategyMismatch("closed-form-gaussian needs a standard-gaussian density".into())
                })?;
                let prec = crate::linalg::sym_inv(&cov);
                let prec_mean = &prec * &mean;
                Prepared::Gaussian { mean, prec, cov, prec_mean }
            }
            MomentStrategy::GridQuadrature { order } => {
                if f.dim > MAX_GRID_DIM {
                    return Err(Error::StrategyMismatch(format!(
                        "grid-quadrature supports n ≤ {MAX_GRID_DIM}, got {}",
                        f.dim
                    )));
                }
                let global = f.rule(*order)?;
                Prepared::Grid { order: *order, global, windowed: f.base_box().is_some() }
            }
            MomentStrategy::ParticleWeights { particles, seed } => {
                let pts = f.sample_many(*particles, *seed)?;
                Prepared::Particles(PointMeasure::from_samples(f.dim, pts))
            }
        };
        Ok(Tilter { f, kind })
    }

    pub fn density(&self) -> &Arc<LogDensity> {
        &self.f
    }

    /// Moments at `s`; `hint` (the moments at a nearby state) lets the grid
    /// strategy place its window without a global pass.
    pub fn moments_near(&self, s: &TiltState, hint: Option<&TiltedMoments>) -> Result<TiltedMoments> {
        let m = self.moments_raw(s, hint)?;
        check_floor(&m.cov)?;
        Ok(m)
    }

    /// As [`Tilter::moments_near`] without the covariance floor check.
    pub fn moments_raw(&self, s: &TiltState, hint: Option<&TiltedMoments>) -> Result<TiltedMoments> {
        let m = match &self.kind {
            Prepared::Gaussian { mean, prec, cov, prec_mean } => {
                let n = mean.len();
                let p = symmetrize(&(prec + &s.b));
                let a_cov = crate::linalg::sym_inv(&p);
                let rhs = prec_mean + &s.c;
                let a = &a_cov * &rhs;
                let det = (DMatrix::identity(n, n) + cov * &s.b).determinant();
                let log_v = -0.5 * det.ln() + 0.5 * rhs.dot(&a) - 0.5 * mean.dot(prec_mean);
                TiltedMoments { log_v, a, cov: a_cov, n_eff: f64::INFINITY }
            }
            Prepared::Particles(pm) => tilted(pm, s)?,
            Prepared::Grid { order, global, windowed } => {
                if !windowed {
                    tilted(global, s)?
                } else {
                    let mut cur = match hint {
                        Some(h) => h.clone(),
                        None => tilted(global, s)?,
                    };
                    let (passes, mut floor) = match hint {
                        Some(_) => (1, 0.0),
                        None => (3, self.node_spacing(*order)),
                    };
                    for _ in 0..passes {
                        cur = match self.windowed(s, &cur, *order, WINDOW_WIDTH, floor)? {
                            Some(m) => m,
                            None => tilted(global, s)?,
                        };
                        floor = 0.0;
                    }
                    cur
                }
            }
        };
        if !m.log_v.is_finite() {
            return Err(Error::NonNormalizable(m.log_v.exp()));
        }
        Ok(m)
    }

    pub fn moments(&self, s: &TiltState) -> Result<TiltedMoments> {
        self.moments_near(s, None)
    }

    /// Largest gap between adjacent global nodes along any base axis.
    fn node_spacing(&self, order: usize) -> f64 {
        match self.f.base_box() {
            Some((lo, hi)) => lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max) * 4.0 / order as f64,
            None => 0.0,
        }
    }

    /// Quadrature window around `around`: the covariance frame when it fits
    /// inside the support box, the clipped axis-aligned box otherwise.
    fn window(&self, around: &TiltedMoments, order: usize, width: f64, floor: f64) -> Result<Option<PointMeasure>> {
        if floor == 0.0 {
            let frame = crate::linalg::sym_sqrt(&around.cov);
            if let Some(pm) = self.f.frame_window_rule(&around.a, &frame, width, order)? {
                if !pm.is_empty() {
                    return Ok(Some(pm));
                }
            }
        }
        let (lo, hi) = self.f.base_window(&around.a, &around.cov, width, floor);
        Ok(self.f.box_window_rule(&lo, &hi, order)?.filter(|pm| !pm.is_empty()))
    }

    fn windowed(
        &self,
        s: &TiltState,
        around: &TiltedMoments,
        order: usize,
        width: f64,
        floor: f64,
    ) -> Result<Option<TiltedMoments>> {
        match self.window(around, order, width, floor)? {
            Some(pm) => Ok(Some(tilted(&pm, s)?)),
            None => Ok(None),
        }
    }

    /// Mass of `V⁻¹ e^{tilt} f` on an independent reference rule (different
    /// order and wider window); equals 1 up to quadrature error.
    pub fn reference_mass(&self, s: &TiltState, m: &TiltedMoments) -> Result<f64> {
        let reference = match &self.kind {
            Prepared::Grid { order, windowed: true, .. } => {
                self.windowed(s, m, order + 17, WINDOW_WIDTH + 4.0, 0.0)?.map(|r| r.log_v)
            }
            Prepared::Grid { order, .. } => Some(tilted(&self.f.rule(order + 17)?, s)?.log_v),
            _ => None,
        };
        let log_ref = match reference {
            Some(v) => v,
            None => {
                let n = self.f.dim;
                if n > MAX_GRID_DIM {
                    return Err(Error::QuadratureDimensionTooHigh { dim: n, max: MAX_GRID_DIM });
                }
                match self.window(m, DEFAULT_ORDER + 17, WINDOW_WIDTH + 4.0, 0.0)? {
                    Some(pm) => tilted(&pm, s)?.log_v,
                    None => tilted(&self.f.rule(DEFAULT_ORDER + 17)?, s)?.log_v,
                }
            }
        };
        Ok((log_ref - m.log_v).exp())
    }

    /// Mass of `{⟨ν,x⟩ < offset}` under `f_s` by quadrature on the window
    /// clipped at the cut. `None` unless the halfspace is a coordinate
    /// halfspace of a box-supported base.
    pub fn halfspace_mass(
        &self,
        s: &TiltState,
        m: &TiltedMoments,
        normal: &DVector<f64>,
        offset: f64,
    ) -> Result<Option<f64>> {
        let order = match &self.kind {
            Prepared::Grid { order, .. } => *order,
            _ => DEFAULT_ORDER,
        };
        let Some((axis, bound, upper)) = self.f.base_halfspace(normal, offset) else { return Ok(None) };
        if self.f.base_box().is_none() || self.f.dim > MAX_GRID_DIM {
            return Ok(None);
        }
        let (lo, hi) = self.f.base_window(&m.a, &m.cov, WINDOW_WIDTH, 0.0);
        let mass = |lo: &[f64], hi: &[f64]| -> Result<Option<f64>> {
            Ok(match self.f.box_window_rule(lo, hi, order)? {
                Some(pm) if !pm.is_empty() => Some(tilted(&pm, s)?.log_v),
                _ => None,
            })
        };
        let Some(total) = mass(&lo, &hi)? else { return Ok(None) };
        let (mut clo, mut chi) = (lo.clone(), hi.clone());
        if upper {
            chi[axis] = chi[axis].min(bound);
        } else {
            clo[axis] = clo[axis].max(bound);
        }
        if !(chi[axis] > clo[axis]) {
            return Ok(Some(0.0));
        }
        Ok(Some(match mass(&clo, &chi)? {
            Some(part) => (part - total).exp().min(1.0),
            None => 0.0,
        }))
    }

    /// Normalized quadrature measure of the tilted density, for statistics
    /// beyond second moments.
    pub fn measure(&self, s: &TiltState, m: &TiltedMoments) -> Result<PointMeasure> {
        let base = match &self.kind {
            Prepared::Particles(pm) => pm.clone(),
            Prepared::Grid { order, global, windowed } => {
                let w = if *windowed { self.window(m, *order, WINDOW_WIDTH, 0.0)? } else { None };
                w.unwrap_or_else(|| global.clone())
            }
            Prepared::Gaussian { .. } => {
                let n = self.f.dim;
                if n > MAX_GRID_DIM {
                    return Err(Error::QuadratureDimensionTooHigh { dim: n, max: MAX_GRID_DIM });
                }
                self.window(m, DEFAULT_ORDER, WINDOW_WIDTH, 0.0)?.ok_or(Error::NonNormalizable(0.0))?
            }
        };
        let (lw, max) = base.tilted_log_weights(|x| s.exponent(x));
        let (p, _) = PointMeasure::normalize(&lw, max)?;
        Ok(PointMeasure { dim: base.dim, points: base.points, log_w: p.iter().map(|v| v.ln()).collect() })
    }
}

fn tilted(pm: &PointMeasure, s: &TiltState) -> Result<TiltedMoments> {
    let r = pm.moments_tilted(|x| s.exponent(x))?;
    Ok(TiltedMoments { log_v: r.log_mass, a: r.mean, cov: r.cov, n_eff: r.n_eff })
}

/// One-shot tilted moments.
pub fn tilted_moments(f: &LogDensity, s: &TiltState, strategy: &MomentStrategy) -> Result<TiltedMoments> {
    Tilter::new(Arc::new(f.clone()), strategy)?.moments(s)
}

/// The most accurate strategy available for `f`.
pub fn default_strategy(f: &LogDensity) -> MomentStrategy {
    if f.gaussian_params().is_some() {
        MomentStrategy::ClosedFormGaussian
    } else {
        MomentStrategy::grid()
    }
}

/// `f_t(x) = V⁻¹ e^{⟨c,x⟩ − ½⟨Bx,x⟩} f(x)` as a density in its own right.
pub fn conditional_density_form(f: &LogDensity, s: &TiltState) -> Result<LogDensity> {
    if s.t == 0.0 && s.c.amax() == 0.0 && s.b.amax() == 0.0 {
        return Ok(f.clone());
    }
    let m = tilted_moments(f, s, &default_strategy(f))?;
    Ok(LogDensity::tilted(f, s.c.clone(), s.b.clone(), m.log_v))
}
