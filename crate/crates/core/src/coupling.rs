//! Two localizations coupled through one Brownian motion and the covariance
//! of the first, together with the supremum convolution that controls them.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{represent, Estimator};
use crate::engine::{check_isotropic, Schedule};
use crate::error::{Error, Result};
use crate::geometry::{in_midpoint_body, planar_area_from_support, Body, BodySpec};
use crate::linalg::{check_floor, sym_eigen, sym_inv, sym_inv_sqrt, sym_sqrt};
use crate::measures::{exact_moments, make_density, DensitySpec, LogDensity};
use crate::noise::Noise;
use crate::points::{n_eff, weighted_mean_cov, PointMeasure};
use crate::quadrature::box_rule;
use crate::stats::{mean_se, quantile};

/// Inner maximization: coarse points per axis, then zoom rounds.
const SUP_COARSE: usize = 17;
const SUP_ZOOM_POINTS: usize = 9;
const SUP_ZOOM_ROUNDS: usize = 20;
/// Directions for the polygonal area of a planar midpoint body.
const POLYGON_DIRECTIONS: usize = 4096;
/// Cells per axis when a midpoint body in three dimensions is measured.
const MIDPOINT_GRID_3D: usize = 40;

pub const DEFAULT_OP_CAP: f64 = 10.0;

/// `H(f,g)(x) = sup_y √(f(x+y) g(x−y))` and its mass `K(f,g)`.
#[derive(Clone)]
pub struct SupConvolution {
    pub dim: usize,
    pub total_mass: f64,
    /// `(K, T)` when both densities are uniform on bodies; `H` is then
    /// constant on `(K + T)/2`.
    pub exact_body: Option<(Body, Body)>,
    level: f64,
    f: Arc<LogDensity>,
    g: Arc<LogDensity>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    order: usize,
}

impl std::fmt::Debug for SupConvolution {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("SupConvolution")
            .field("dim", &self.dim)
            .field("total_mass", &self.total_mass)
            .field("exact_body", &self.exact_body.is_some())
            .finish()
    }
}

pub fn sup_convolution(f: &Arc<LogDensity>, g: &Arc<LogDensity>, order: usize) -> Result<SupConvolution> {
    let n = f.dim;
    if g.dim != n {
        return Err(Error::DimensionMismatch { expected: n, got: g.dim });
    }
    if let (Some(kb), Some(tb)) = (f.as_uniform_body(), g.as_uniform_body()) {
        if n > 3 {
            return Err(Error::GridDimensionTooHigh { dim: n, max: 3 });
        }
        let level = -0.5 * (kb.volume()?.ln() + tb.volume()?.ln());
        let (klo, khi) = kb.bounding_box();
        let (tlo, thi) = tb.bounding_box();
        let lo: Vec<f64> = klo.iter().zip(&tlo).map(|(a, b)| 0.5 * (a + b)).collect();
        let hi: Vec<f64> = khi.iter().zip(&thi).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut sc = SupConvolution {
            dim: n,
            total_mass: f64::NAN,
            exact_body: Some((kb, tb)),
            level,
            f: f.clone(),
            g: g.clone(),
            lo,
            hi,
            order,
        };
        let vol = match n {
            1 => sc.hi[0] - sc.lo[0],
            2 => {
                let (kb, tb) = sc.exact_body.as_ref().expect("set above");
                planar_area_from_support(|u| 0.5 * (kb.support(u) + tb.support(u)), POLYGON_DIRECTIONS)
            }
            _ => sc.grid_total_mass(MIDPOINT_GRID_3D)? / level.exp(),
        };
        sc.total_mass = vol * level.exp();
        return Ok(sc);
    }
    if n > 2 {
        return Err(Error::GridDimensionTooHigh { dim: n, max: 2 });
    }
    let r = 0.5 * (f.support_radius() + g.support_radius());
    let mut sc = SupConvolution {
        dim: n,
        total_mass: f64::NAN,
        exact_body: None,
        level: f64::NAN,
        f: f.clone(),
        g: g.clone(),
        lo: vec![-r; n],
        hi: vec![r; n],
        order,
    };
    let pm = sc.quadrature()?;
    sc.total_mass = pm.log_w.iter().map(|w| w.exp()).sum();
    Ok(sc)
}

impl SupConvolution {
    pub fn log_value(&self, x: &[f64]) -> f64 {
        match &self.exact_body {
            Some((kb, tb)) => {
                // Alternating projections stall near the boundary, so the
                // tolerance is loose relative to the body size.
                if in_midpoint_body(kb, tb, x, 1e-6 * (kb.radius() + tb.radius())) {
                    self.level
                } else {
                    f64::NEG_INFINITY
                }
            }
            None => self.inner_max(x),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.log_value(x).exp()
    }

    /// The objective is concave in `y`, so the best coarse point brackets the
    /// maximizer and successive local grids converge to it.
    fn inner_max(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        let ry = self.f.support_radius() + self.g.support_radius();
        let obj = |y: &[f64]| {
            let p: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
            let lf = self.f.log_eval(&p);
            if lf == f64::NEG_INFINITY {
                return lf;
            }
            let q: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            0.5 * (lf + self.g.log_eval(&q))
        };
        let scan = |center: &[f64], half: f64, m: usize, best: &mut (f64, Vec<f64>)| {
            let step = 2.0 * half / (m - 1) as f64;
            let mut idx = vec![0usize; n];
            let mut y = vec![0.0; n];
            loop {
                for i in 0..n {
                    y[i] = center[i] - half + step * idx[i] as f64;
                }
                let v = obj(&y);
                if v > best.0 {
                    *best = (v, y.clone());
                }
                let mut i = 0;
                while i < n {
                    idx[i] += 1;
                    if idx[i] < m {
                        break;
                    }
                    idx[i] = 0;
                    i += 1;
                }
                if i == n {
                    break;
                }
            }
        };
        let mut best = (obj(&vec![0.0; n]), vec![0.0; n]);
        scan(&vec![0.0; n], ry, SUP_COARSE, &mut best);
        if best.0 == f64::NEG_INFINITY {
            return best.0;
        }
        let mut half = 2.0 * ry / (SUP_COARSE - 1) as f64;
        for _ in 0..SUP_ZOOM_ROUNDS {
            let c = best.1.clone();
            scan(&c, half, SUP_ZOOM_POINTS, &mut best);
            half /= 4.0;
        }
        best.0
    }

    /// Cell-midpoint sum of `H` on a grid of `resolution` cells per axis.
    pub fn grid_total_mass(&self, resolution: usize) -> Result<f64> {
        let pm = self.cell_grid(resolution)?;
        Ok(pm.log_w.iter().map(|w| w.exp()).sum())
    }

    fn cell_grid(&self, resolution: usize) -> Result<PointMeasure> {
        let n = self.dim;
        if n > 3 {
            return Err(Error::GridDimensionTooHigh { dim: n, max: 3 });
        }
        let m = resolution.max(1);
        let widths: Vec<f64> = self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l) / m as f64).collect();
        let cell = widths.iter().product::<f64>();
        let mut pts = Vec::new();
        let mut w = Vec::new();
        for lin in 0..m.pow(n as u32) {
            let mut r = lin;
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    let k = r % m;
                    r /= m;
                    self.lo[i] + (k as f64 + 0.5) * widths[i]
                })
                .collect();
            pts.extend_from_slice(&x);
            w.push(cell);
        }
        Ok(PointMeasure::from_rule(n, &pts, &w, |x| self.log_value(x)))
    }

    fn quadrature(&self) -> Result<PointMeasure> {
        let (u, w) = box_rule(&self.lo, &self.hi, self.order);
        Ok(PointMeasure::from_rule(self.dim, &u, &w, |x| self.log_value(x)))
    }

    /// `H/K` as a probability point measure: cell midpoints for a body pair,
    /// Gauss–Legendre nodes otherwise.
    pub fn represent(&self) -> Result<PointMeasure> {
        let pm = if self.exact_body.is_some() { self.cell_grid(self.order)? } else { self.quadrature()? };
        if pm.is_empty() {
            return Err(Error::NonNormalizable(0.0));
        }
        let p = pm.probabilities()?;
        Ok(PointMeasure { dim: pm.dim, points: pm.points, log_w: p.iter().map(|v| v.ln()).collect() })
    }
}

/// The three measures a coupled run evolves, each a probability point
/// measure; `k` rescales the third to `h = K·(H/K)`.
#[derive(Debug, Clone)]
pub struct CoupledProblem {
    pub dim: usize,
    pub f: PointMeasure,
    pub g: PointMeasure,
    pub h: PointMeasure,
    pub k: f64,
    pub min_neff: f64,
}

fn probability_measure(pm: PointMeasure) -> Result<PointMeasure> {
    let p = pm.probabilities()?;
    Ok(PointMeasure { dim: pm.dim, points: pm.points, log_w: p.iter().map(|v| v.ln()).collect() })
}

impl CoupledProblem {
    /// `f` must be isotropic and `g` centered.
    pub fn new(f: &LogDensity, g: &LogDensity, sup: &SupConvolution, est: Estimator) -> Result<Self> {
        check_isotropic(f)?;
        match exact_moments(g) {
            Ok(m) => {
                let off = m.barycenter.norm();
                if off > 1e-6 {
                    return Err(Error::InvalidSpec(format!("second density is not centered (|mean| = {off:.3e})")));
                }
            }
            Err(Error::QuadratureDimensionTooHigh { .. }) => {}
            Err(e) => return Err(e),
        }
        Self::from_measures(represent(f, est)?, represent(g, est)?, sup.represent()?, sup.total_mass)
    }

    pub fn from_measures(f: PointMeasure, g: PointMeasure, h: PointMeasure, k: f64) -> Result<Self> {
        let dim = f.dim;
        for pm in [&g, &h] {
            if pm.dim != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: pm.dim });
            }
        }
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::NonNormalizable(k));
        }
        Ok(CoupledProblem {
            dim,
            f: probability_measure(f)?,
            g: probability_measure(g)?,
            h: probability_measure(h)?,
            k,
            min_neff: 10.0,
        })
    }
}

/// `log F_t(x) = ⟨c,x⟩ − ½⟨Bx,x⟩ + k` for each of the three processes, with
/// the normalizations of `f_t` and `g_t` folded into the constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTilt {
    pub c_f: DVector<f64>,
    pub c_g: DVector<f64>,
    pub c_h: DVector<f64>,
    pub b: DMatrix<f64>,
    pub k_f: f64,
    pub k_g: f64,
    pub k_h: f64,
}

impl CoupledTilt {
    fn new(n: usize) -> Self {
        CoupledTilt {
            c_f: DVector::zeros(n),
            c_g: DVector::zeros(n),
            c_h: DVector::zeros(n),
            b: DMatrix::zeros(n, n),
            k_f: 0.0,
            k_g: 0.0,
            k_h: 0.0,
        }
    }

    fn quad(&self, c: &DVector<f64>, x: &[f64]) -> f64 {
        crate::measures::tilt_exponent(c, &self.b, x)
    }

    pub fn log_f(&self, x: &[f64]) -> f64 {
        self.quad(&self.c_f, x) + self.k_f
    }

    pub fn log_g(&self, x: &[f64]) -> f64 {
        self.quad(&self.c_g, x) + self.k_g
    }

    pub fn log_h(&self, x: &[f64]) -> f64 {
        self.quad(&self.c_h, x) + self.k_h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRecord {
    pub t: f64,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    /// Covariance of `f_t`, the shared driver.
    pub cov_a: DMatrix<f64>,
    pub cov_c: DMatrix<f64>,
    /// `S_t = ∫h_t`.
    pub s: f64,
    /// Running maxima of `S` and of `‖A_s‖_OP e^s`.
    pub s_max: f64,
    pub op_ratio_max: f64,
    pub gap_sq: f64,
    pub d_hs_sq: f64,
    /// `Σ λ_j δ_j²` with `λ` decreasing and `|δ|` decreasing.
    pub d_matrix_rhs: f64,
    /// Eigenvalues of `I − A^{-1/2} C A^{-1/2}`, decreasing.
    pub deltas: DVector<f64>,
    pub int_d: f64,
    /// Realized covariations of `a` and `b` and their predicted values
    /// `∫A` and `∫C A⁻¹ C`.
    pub qv_a: DMatrix<f64>,
    pub pred_a: DMatrix<f64>,
    pub qv_b: DMatrix<f64>,
    pub pred_b: DMatrix<f64>,
    /// Log of the unnormalized masses of the `f` and `g` clouds.
    pub log_mass_f: f64,
    pub log_mass_g: f64,
    pub n_eff: [f64; 3],
    pub tilt: CoupledTilt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrajectory {
    pub run: u64,
    pub seed: u64,
    pub dim: usize,
    pub k: f64,
    pub records: Vec<CoupledRecord>,
}

impl CoupledTrajectory {
    /// First record at or after `t`.
    pub fn at(&self, t: f64) -> Option<&CoupledRecord> {
        self.records.iter().find(|r| r.t >= t - 1e-9)
    }
}

/// `‖D‖²_HS` for `D = A^{1/2}(I − A^{-1/2} C A^{-1/2})`, the right side
/// `Σ λ_j δ_j²`, and the `δ_j`.
pub fn d_matrix_terms(a: &DMatrix<f64>, c: &DMatrix<f64>) -> (f64, f64, DVector<f64>) {
    let n = a.nrows();
    let ais = sym_inv_sqrt(a);
    let m = DMatrix::identity(n, n) - &ais * c * &ais;
    let lhs = (sym_sqrt(a) * &m).norm_squared();
    let lam = sym_eigen(a).values;
    let deltas = sym_eigen(&m).values;
    let mut mags: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
    mags.sort_by(|x, y| y.total_cmp(x));
    let rhs = lam.iter().zip(&mags).map(|(l, d)| l * d * d).sum();
    (lhs, rhs, deltas)
}

struct Cloud<'a> {
    pm: &'a PointMeasure,
    /// Current log weights.
    lw: Vec<f64>,
}

impl<'a> Cloud<'a> {
    fn new(pm: &'a PointMeasure) -> Self {
        Cloud { pm, lw: pm.log_w.clone() }
    }

    /// Reset to base weights times `exp(⟨c,x⟩ − ½⟨Bx,x⟩ + k)`; returns the
    /// log of the total mass.
    fn retilt(&mut self, c: &DVector<f64>, b: &DMatrix<f64>, k: f64) -> f64 {
        let n = self.pm.dim;
        let mut max = f64::NEG_INFINITY;
        for (i, x) in self.pm.points.chunks_exact(n).enumerate() {
            let v = self.pm.log_w[i] + crate::measures::tilt_exponent(c, b, x) + k;
            self.lw[i] = v;
            max = max.max(v);
        }
        max + self.lw.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    fn probabilities(&self) -> Vec<f64> {
        let max = self.lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.lw.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }

    fn moments(&self, min_neff: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.probabilities();
        let ne = n_eff(&p);
        if ne < min_neff {
            return Err(Error::DegenerateCloud { n_eff: ne, min: min_neff });
        }
        Ok(weighted_mean_cov(self.pm.dim, &self.pm.points, &p))
    }

    fn n_eff(&self) -> f64 {
        n_eff(&self.probabilities())
    }
}

/// Evolve the three clouds with shared increments and the `f`-side
/// `A_t^{-1/2}`. Each step applies the exact exponential of the Euler
/// increment; `f_t` and `g_t` are renormalized, and `h_t` is divided by the
/// geometric mean of their step masses so that `f = g` gives `S_t ≡ 1`.
pub fn run_coupled(problem: &CoupledProblem, schedule: &Schedule, seed: u64, run: u64) -> Result<CoupledTrajectory> {
    schedule.validate()?;
    let n = problem.dim;
    let noise = Noise::new(seed, n);
    let mut fc = Cloud::new(&problem.f);
    let mut gc = Cloud::new(&problem.g);
    let mut hc = Cloud::new(&problem.h);
    let mut tilt = CoupledTilt::new(n);
    let mut t = 0.0;
    let (mut log_mass_f, mut log_mass_g) = (0.0, 0.0);
    let mut s = problem.k;
    let mut s_max = s;
    let mut op_ratio_max: f64 = 0.0;
    let mut int_d = 0.0;
    let zero = DMatrix::<f64>::zeros(n, n);
    let (mut qv_a, mut pred_a, mut qv_b, mut pred_b) = (zero.clone(), zero.clone(), zero.clone(), zero);
    let mut records = Vec::new();
    let mut step = 0usize;
    let h = schedule.dt;

    let (mut a, mut cov_a) = fc.moments(problem.min_neff)?;
    let (mut b, mut cov_c) = gc.moments(problem.min_neff)?;
    let record = |t: f64,
                  a: &DVector<f64>,
                  b: &DVector<f64>,
                  cov_a: &DMatrix<f64>,
                  cov_c: &DMatrix<f64>,
                  extra: (f64, f64, f64, f64, f64, f64),
                  mats: [&DMatrix<f64>; 4],
                  tilt: &CoupledTilt,
                  ne: [f64; 3]| {
        let (lhs, rhs, deltas) = d_matrix_terms(cov_a, cov_c);
        let (s, s_max, op_ratio_max, int_d, lmf, lmg) = extra;
        CoupledRecord {
            t,
            a: a.clone(),
            b: b.clone(),
            cov_a: cov_a.clone(),
            cov_c: cov_c.clone(),
            s,
            s_max,
            op_ratio_max,
            gap_sq: (a - b).norm_squared(),
            d_hs_sq: lhs,
            d_matrix_rhs: rhs,
            deltas,
            int_d,
            qv_a: mats[0].clone(),
            pred_a: mats[1].clone(),
            qv_b: mats[2].clone(),
            pred_b: mats[3].clone(),
            log_mass_f: lmf,
            log_mass_g: lmg,
            n_eff: ne,
            tilt: tilt.clone(),
        }
    };
    op_ratio_max = op_ratio_max.max(sym_eigen(&cov_a).max());
    records.push(record(
        t,
        &a,
        &b,
        &cov_a,
        &cov_c,
        (s, s_max, op_ratio_max, int_d, 0.0, 0.0),
        [&qv_a, &pred_a, &qv_b, &pred_b],
        &tilt,
        [fc.n_eff(), gc.n_eff(), hc.n_eff()],
    ));

    let refine = schedule.refine;
    'outer: for ns in 0..schedule.noise_steps() {
        let incs: Vec<DVector<f64>> = if refine == 0 {
            vec![noise.increment(run, ns, schedule.noise_step())]
        } else {
            noise.refined(run, ns, schedule.noise_step(), refine).into_iter().map(|(_, v)| v).collect()
        };
        for dw in incs {
            check_floor(&cov_a)?;
            let l = sym_inv(&cov_a);
            let u = sym_inv_sqrt(&cov_a) * &dw;
            let m = (&a + &b) * 0.5;
            let (d_lhs, _, _) = d_matrix_terms(&cov_a, &cov_c);
            int_d += d_lhs * h;
            pred_a += &cov_a * h;
            pred_b += &cov_c * &l * &cov_c * h;

            let lz = &l * h;
            tilt.b += &lz;
            for (c, k, z) in [
                (&mut tilt.c_f, &mut tilt.k_f, &a),
                (&mut tilt.c_g, &mut tilt.k_g, &b),
                (&mut tilt.c_h, &mut tilt.k_h, &m),
            ] {
                *c += &u + &lz * z;
                *k += -z.dot(&u) - 0.5 * z.dot(&(&lz * z));
            }
            let zf = fc.retilt(&tilt.c_f, &tilt.b, tilt.k_f);
            let zg = gc.retilt(&tilt.c_g, &tilt.b, tilt.k_g);
            tilt.k_f -= zf;
            tilt.k_g -= zg;
            tilt.k_h -= 0.5 * (zf + zg);
            log_mass_f += zf;
            log_mass_g += zg;
            for v in fc.lw.iter_mut() {
                *v -= zf;
            }
            for v in gc.lw.iter_mut() {
                *v -= zg;
            }
            s = problem.k * hc.retilt(&tilt.c_h, &tilt.b, tilt.k_h).exp();
            if !s.is_finite() {
                return Err(Error::QuadratureOverflow);
            }
            s_max = s_max.max(s);
            if hc.n_eff() < problem.min_neff {
                return Err(Error::DegenerateCloud { n_eff: hc.n_eff(), min: problem.min_neff });
            }

            let (a1, ca1) = fc.moments(problem.min_neff)?;
            let (b1, cc1) = gc.moments(problem.min_neff)?;
            let da = &a1 - &a;
            let db = &b1 - &b;
            qv_a += &da * da.transpose();
            qv_b += &db * db.transpose();
            a = a1;
            b = b1;
            cov_a = ca1;
            cov_c = cc1;
            t += h;
            step += 1;
            op_ratio_max = op_ratio_max.max(sym_eigen(&cov_a).max() * t.exp());
            let done = t >= schedule.t_max - 1e-9 || cov_a.trace() < schedule.stop_trace * n as f64;
            if step % schedule.stride == 0 || done {
                records.push(record(
                    t,
                    &a,
                    &b,
                    &cov_a,
                    &cov_c,
                    (s, s_max, op_ratio_max, int_d, log_mass_f, log_mass_g),
                    [&qv_a, &pred_a, &qv_b, &pred_b],
                    &tilt,
                    [fc.n_eff(), gc.n_eff(), hc.n_eff()],
                ));
            }
            if done {
                break 'outer;
            }
        }
    }
    Ok(CoupledTrajectory { run, seed, dim: n, k: problem.k, records })
}

pub fn run_coupled_ensemble(problem: &CoupledProblem, schedule: &Schedule, seed: u64, runs: u64) -> Result<Vec<CoupledTrajectory>> {
    (0..runs).into_par_iter().map(|r| run_coupled(problem, schedule, seed, r)).collect()
}

fn aligned(runs: &[CoupledTrajectory], min_runs: usize) -> Result<usize> {
    if runs.len() < min_runs {
        return Err(Error::InsufficientRuns { got: runs.len(), need: min_runs });
    }
    let len = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    for run in runs {
        for (r, q) in run.records[..len].iter().zip(&runs[0].records) {
            if (r.t - q.t).abs() > 1e-9 {
                return Err(Error::InconsistentTime(r.t, q.t));
            }
        }
    }
    Ok(len)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub t: Vec<f64>,
    /// Across-run means of `|a_t − b_t|²` and `∫₀ᵗ‖D_s‖²_HS ds`.
    pub gap_sq: Vec<f64>,
    pub int_d: Vec<f64>,
    /// Standard error of the per-run difference.
    pub se: Vec<f64>,
    pub identity_pass: bool,
    /// Relative gap between averaged realized covariation of `b` and
    /// averaged `∫C A⁻¹ C`, at the last common record.
    pub qv_gap: f64,
    pub qv_pass: bool,
}

impl DriftReport {
    pub fn pass(&self) -> bool {
        self.identity_pass && self.qv_pass
    }
}

pub const DRIFT_MIN_RUNS: usize = 100;

pub fn drift_diagnostic(runs: &[CoupledTrajectory], rel_tol: f64, qv_tol: f64) -> Result<DriftReport> {
    let len = aligned(runs, DRIFT_MIN_RUNS)?;
    let (mut ts, mut lhs, mut rhs, mut ses) = (vec![], vec![], vec![], vec![]);
    let mut identity_pass = true;
    for k in 0..len {
        let gl: Vec<f64> = runs.iter().map(|r| r.records[k].gap_sq).collect();
        let dl: Vec<f64> = runs.iter().map(|r| r.records[k].int_d).collect();
        let diff: Vec<f64> = gl.iter().zip(&dl).map(|(x, y)| x - y).collect();
        let (md, sd) = mean_se(&diff);
        let (mg, _) = mean_se(&gl);
        let (mi, _) = mean_se(&dl);
        identity_pass &= md.abs() <= rel_tol * mi + 3.0 * sd + 1e-12;
        ts.push(runs[0].records[k].t);
        lhs.push(mg);
        rhs.push(mi);
        ses.push(sd);
    }
    let n = runs[0].dim;
    let mut qv = DMatrix::<f64>::zeros(n, n);
    let mut pred = DMatrix::<f64>::zeros(n, n);
    for r in runs {
        qv += &r.records[len - 1].qv_b;
        pred += &r.records[len - 1].pred_b;
    }
    let scale = pred.amax();
    let qv_gap = if scale > 0.0 { (qv - &pred).amax() / scale } else { 0.0 };
    Ok(DriftReport { t: ts, gap_sq: lhs, int_d: rhs, se: ses, identity_pass, qv_gap, qv_pass: qv_gap <= qv_tol })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledMartingales {
    pub t: Vec<f64>,
    pub s_mean: Vec<f64>,
    pub s_se: Vec<f64>,
    /// Largest standardized deviation of `E[S_t]` from `K(f,g)`.
    pub s_max_z: f64,
    /// Largest standardized deviation of the `f` and `g` cloud masses from 1.
    pub mass_max_z: f64,
    pub pass: bool,
}

fn z_score(xs: &[f64], target: f64) -> f64 {
    let (m, s) = mean_se(xs);
    let d = (m - target).abs();
    if d <= 1e-12 * target.abs().max(1.0) {
        0.0
    } else if s > 0.0 {
        d / s
    } else {
        f64::INFINITY
    }
}

pub fn coupled_martingales(runs: &[CoupledTrajectory]) -> Result<CoupledMartingales> {
    let len = aligned(runs, 2)?;
    let k = runs[0].k;
    let (mut ts, mut sm, mut ss) = (vec![], vec![], vec![]);
    let (mut sz, mut mz): (f64, f64) = (0.0, 0.0);
    for i in 0..len {
        let sv: Vec<f64> = runs.iter().map(|r| r.records[i].s).collect();
        let (m, se) = mean_se(&sv);
        sz = sz.max(z_score(&sv, k));
        for mass in [
            runs.iter().map(|r| r.records[i].log_mass_f.exp()).collect::<Vec<_>>(),
            runs.iter().map(|r| r.records[i].log_mass_g.exp()).collect::<Vec<_>>(),
        ] {
            mz = mz.max(z_score(&mass, 1.0));
        }
        ts.push(runs[0].records[i].t);
        sm.push(m);
        ss.push(se);
    }
    Ok(CoupledMartingales { t: ts, s_mean: sm, s_se: ss, s_max_z: sz, mass_max_z: mz, pass: sz <= 3.0 && mz <= 3.0 })
}

/// Largest `‖D‖²_HS − Σλ_jδ_j²` over all records; the bound holds when this
/// is at most `1e-8`.
pub fn d_matrix_excess(runs: &[CoupledTrajectory]) -> f64 {
    runs.iter()
        .flat_map(|r| r.records.iter())
        .map(|r| r.d_hs_sq - r.d_matrix_rhs)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest `log h_t(x) − max_y ½(log f_t(x+y) + log g_t(x−y))` over the
/// given points, skipping points where the right side is `−∞`.
pub fn domination_gap(
    rec: &CoupledRecord,
    f: &LogDensity,
    g: &LogDensity,
    sup: &SupConvolution,
    xs: &[f64],
    ys: &[f64],
) -> f64 {
    let n = f.dim;
    let mut worst = f64::INFINITY;
    for x in xs.chunks_exact(n) {
        let mut best = f64::NEG_INFINITY;
        for y in ys.chunks_exact(n) {
            let p: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
            let q: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            let lf = f.log_eval(&p) + rec.tilt.log_f(&p);
            let lg = g.log_eval(&q) + rec.tilt.log_g(&q);
            best = best.max(0.5 * (lf + lg));
        }
        if best == f64::NEG_INFINITY {
            continue;
        }
        worst = worst.min(sup.log_value(x) + rec.tilt.log_h(x) - best);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WassersteinReport {
    pub t: f64,
    pub eps: f64,
    pub mass_cap: f64,
    pub op_cap: f64,
    pub runs: usize,
    pub kept: usize,
    pub kept_fraction: f64,
    /// Fraction of runs whose running maximum of `S` stays below the cap,
    /// against the maximal-inequality level `1 − ε/2`.
    pub mass_cap_frequency: f64,
    pub doob_level: f64,
    /// `√(mean over kept runs of (√Tr A_T + √Tr C_T + |a_T − b_T|)²)`.
    pub bound: f64,
    /// The same over all runs.
    pub bound_all: f64,
    pub mean_gap_sq_kept: f64,
}

/// The empirical sub-probability coupling at time `t`, kept runs being those
/// where `max S ≤ 2K/ε` and `‖A_s‖_OP e^s ≤ op_cap` throughout.
pub fn wasserstein_coupling(runs: &[CoupledTrajectory], t: f64, eps: f64, op_cap: f64) -> Result<WassersteinReport> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidSpec(format!("ε must lie in (0, 1), got {eps}")));
    }
    if runs.is_empty() {
        return Err(Error::InsufficientRuns { got: 0, need: 1 });
    }
    let k = runs[0].k;
    let mass_cap = 2.0 * k / eps;
    let mut cost_kept = vec![];
    let mut gap_kept = vec![];
    let mut cost_all = vec![];
    let mut under_cap = 0usize;
    for run in runs {
        let rec = run.at(t).ok_or_else(|| Error::InvalidSpec(format!("run {} ends before t = {t}", run.run)))?;
        let cost = (rec.cov_a.trace().max(0.0).sqrt() + rec.cov_c.trace().max(0.0).sqrt() + rec.gap_sq.sqrt()).powi(2);
        cost_all.push(cost);
        let mass_ok = rec.s_max <= mass_cap;
        under_cap += usize::from(mass_ok);
        if mass_ok && rec.op_ratio_max <= op_cap {
            cost_kept.push(cost);
            gap_kept.push(rec.gap_sq);
        }
    }
    if cost_kept.is_empty() {
        return Err(Error::AllRunsExcluded);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(WassersteinReport {
        t,
        eps,
        mass_cap,
        op_cap,
        runs: runs.len(),
        kept: cost_kept.len(),
        kept_fraction: cost_kept.len() as f64 / runs.len() as f64,
        mass_cap_frequency: under_cap as f64 / runs.len() as f64,
        doob_level: 1.0 - eps / 2.0,
        bound: mean(&cost_kept).sqrt(),
        bound_all: mean(&cost_all).sqrt(),
        mean_gap_sq_kept: mean(&gap_kept),
    })
}

const W2_GRID: usize = 40_001;
const W2_LEVELS: usize = 20_000;

/// Quantile function on `W2_LEVELS` midpoint levels from a trapezoid CDF.
fn quantiles_1d(f: &LogDensity) -> Vec<f64> {
    let r = f.support_radius();
    let h = 2.0 * r / (W2_GRID - 1) as f64;
    let xs: Vec<f64> = (0..W2_GRID).map(|i| -r + h * i as f64).collect();
    let pdf: Vec<f64> = xs.iter().map(|x| f.log_eval(&[*x]).exp()).collect();
    let mut cdf = vec![0.0; W2_GRID];
    for i in 1..W2_GRID {
        cdf[i] = cdf[i - 1] + 0.5 * h * (pdf[i] + pdf[i - 1]);
    }
    let total = cdf[W2_GRID - 1];
    let mut out = Vec::with_capacity(W2_LEVELS);
    let mut j = 1;
    for k in 0..W2_LEVELS {
        let u = (k as f64 + 0.5) / W2_LEVELS as f64 * total;
        while j < W2_GRID - 1 && cdf[j] < u {
            j += 1;
        }
        let (c0, c1) = (cdf[j - 1], cdf[j]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        out.push(xs[j - 1] + frac * h);
    }
    out
}

/// `W₂(f, g)` on the line via the quantile coupling.
pub fn w2_1d(f: &LogDensity, g: &LogDensity) -> Result<f64> {
    for d in [f.dim, g.dim] {
        if d != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: d });
        }
    }
    let (qf, qg) = (quantiles_1d(f), quantiles_1d(g));
    Ok((qf.iter().zip(&qg).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / W2_LEVELS as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmConfig {
    pub schedule: Schedule,
    pub runs: u64,
    pub seed: u64,
    /// Quadrature order for the two bodies and grid resolution for their
    /// midpoint body.
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_h_order")]
    pub h_order: usize,
    /// Monte Carlo points in `K` for the direct distance quantile.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_op_cap")]
    pub op_cap: f64,
}

fn default_order() -> usize {
    24
}
fn default_h_order() -> usize {
    48
}
fn default_samples() -> usize {
    20_000
}
fn default_op_cap() -> f64 {
    DEFAULT_OP_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BmReport {
    /// `Vol((K + T)/2)` after both bodies are scaled to volume one.
    pub v: f64,
    pub l_k: f64,
    pub theta: f64,
    /// `δ` from the coupling bound and Markov's inequality.
    pub delta: f64,
    /// Smallest `δ` with `Vol(K ∩ T_δ) ≥ 1 − ε`, by Monte Carlo.
    pub delta_star: f64,
    pub ratio: f64,
    pub coupling: WassersteinReport,
}

fn unit_volume(spec: &BodySpec, n: usize) -> Result<Body> {
    let body = spec.build(n)?;
    let s = body.volume()?.powf(-1.0 / n as f64);
    Ok(Body { dim: n, shape: body.shape.scaled(s), center: body.center.iter().map(|c| c * s).collect() })
}

fn scaled_density(body: &Body, s: f64) -> Result<LogDensity> {
    let spec = BodySpec { shape: body.shape.scaled(s), center: Some(body.center.iter().map(|c| c * s).collect()) };
    make_density(&DensitySpec::UniformBody(spec), body.dim)
}

/// Volume-one bodies `K`, `T`; `f`, `g` uniform on `K/L_K`, `T/L_K`; the
/// coupled transport bound `Θ` at `t_max`; and `δ = L_K Θ/√(ε − (1 − P(E)))`
/// against the direct distance quantile.
pub fn bm_stability_experiment(k: &BodySpec, t: &BodySpec, n: usize, eps: f64, cfg: &BmConfig) -> Result<BmReport> {
    if n > 3 {
        return Err(Error::GridDimensionTooHigh { dim: n, max: 3 });
    }
    let kb = unit_volume(k, n)?;
    let tb = unit_volume(t, n)?;
    let (km, kc) = kb.moments()?;
    let (tm, _) = tb.moments()?;
    if km.norm() > 1e-9 || tm.norm() > 1e-9 {
        return Err(Error::InvalidSpec("both bodies must have their barycenter at the origin".into()));
    }
    let l2 = kc.trace() / n as f64;
    let dev = (&kc - DMatrix::identity(n, n) * l2).amax() / l2;
    if dev > 1e-8 {
        return Err(Error::AnisotropicInput(dev));
    }
    let l_k = l2.sqrt();
    let f = Arc::new(scaled_density(&kb, 1.0 / l_k)?);
    let g = Arc::new(scaled_density(&tb, 1.0 / l_k)?);
    let sup = sup_convolution(&f, &g, cfg.h_order)?;
    let problem = CoupledProblem::new(&f, &g, &sup, Estimator::Quadrature { order: cfg.order })?;
    let runs = run_coupled_ensemble(&problem, &cfg.schedule, cfg.seed, cfg.runs)?;
    let coupling = wasserstein_coupling(&runs, cfg.schedule.t_max, eps, cfg.op_cap)?;
    let budget = eps - (1.0 - coupling.kept_fraction);
    if !(budget > 0.0) {
        return Err(Error::AllRunsExcluded);
    }
    let delta = l_k * coupling.bound / budget.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB0D1_E5D1_5A7C_E000);
    let dists: Vec<f64> = (0..cfg.samples).map(|_| tb.distance(&kb.sample(&mut rng))).collect();
    let delta_star = quantile(&dists, 1.0 - eps);
    Ok(BmReport {
        v: sup.total_mass,
        l_k,
        theta: coupling.bound,
        delta,
        delta_star,
        ratio: if delta_star > 0.0 { delta / delta_star } else { f64::INFINITY },
        coupling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;
    use crate::measures::{make_isotropic, Affine, Factor1d};

    fn density(spec: &DensitySpec, n: usize) -> Arc<LogDensity> {
        Arc::new(make_density(spec, n).unwrap())
    }

    fn body(shape: Shape) -> DensitySpec {
        DensitySpec::UniformBody(BodySpec::new(shape))
    }

    #[test]
    fn sup_convolution_of_a_body_with_itself() {
        let f = density(&body(Shape::Cube { side: 1.0 }), 2);
        let sc = sup_convolution(&f, &f, 32).unwrap();
        assert!((sc.total_mass - 1.0).abs() < 1e-5, "{}", sc.total_mass);
        assert!(sc.value(&[0.4, -0.4]) > 0.99 && sc.value(&[0.6, 0.0]) == 0.0);
        let pm = sc.represent().unwrap();
        assert!((pm.probabilities().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_area_two_ways() {
        let r = (1.0 / std::f64::consts::PI).sqrt();
        let f = density(&body(Shape::Cube { side: 1.0 }), 2);
        let g = density(&body(Shape::Ball { radius: r }), 2);
        let sc = sup_convolution(&f, &g, 32).unwrap();
        // Square of side ½ plus a disc of radius r/2: ¼ + r + π r²/4.
        let exact = 0.25 + r + 0.25;
        assert!((sc.total_mass - exact).abs() < 1e-5, "{} vs {exact}", sc.total_mass);
        let grid = sc.grid_total_mass(200).unwrap();
        assert!((grid / sc.total_mass - 1.0).abs() < 0.01, "{grid}");
        assert!(sc.total_mass >= 1.0);
    }

    #[test]
    fn gaussian_sup_convolution_is_itself() {
        let f = density(&DensitySpec::StandardGaussian, 1);
        let sc = sup_convolution(&f, &f, 96).unwrap();
        assert!((sc.total_mass - 1.0).abs() < 1e-6, "{}", sc.total_mass);
        for x in [-2.0, 0.0, 0.7, 3.1] {
            assert!((sc.log_value(&[x]) - f.log_eval(&[x])).abs() < 1e-9);
        }
    }

    #[test]
    fn sup_convolution_dominates_geometric_mean() {
        let f = density(&DensitySpec::StandardGaussian, 1);
        let g = density(&DensitySpec::Product1d { factors: vec![Factor1d::Exponential] }, 1);
        let sc = sup_convolution(&f, &g, 96).unwrap();
        assert!(sc.total_mass >= 1.0);
        for x in [-1.5, -0.3, 0.0, 0.8, 2.0] {
            assert!(sc.log_value(&[x]) >= 0.5 * (f.log_eval(&[x]) + g.log_eval(&[x])) - 1e-12);
        }
        assert!(matches!(
            sup_convolution(&density(&DensitySpec::StandardGaussian, 3), &density(&DensitySpec::StandardGaussian, 3), 8),
            Err(Error::GridDimensionTooHigh { .. })
        ));
    }

    #[test]
    fn d_terms_on_diagonal_pairs() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let (lhs, rhs, deltas) = d_matrix_terms(&a, &c);
        // D = diag(√2·½, 1·(−2)).
        assert!((lhs - (0.5 + 4.0)).abs() < 1e-12);
        assert!((rhs - (2.0 * 4.0 + 1.0 * 0.25)).abs() < 1e-12);
        assert!((deltas[0] - 0.5).abs() < 1e-12 && (deltas[1] + 2.0).abs() < 1e-12);
        assert!(lhs <= rhs);
    }

    fn gauss_problem(n: usize) -> CoupledProblem {
        let f = density(&DensitySpec::StandardGaussian, n);
        let sc = sup_convolution(&f, &f, 1000).unwrap();
        CoupledProblem::new(&f, &f, &sc, Estimator::Quadrature { order: 1000 }).unwrap()
    }

    #[test]
    fn identical_densities_stay_glued() {
        let p = gauss_problem(1);
        let tr = run_coupled(&p, &Schedule::new(1e-2, 2.0), 5, 0).unwrap();
        for r in &tr.records {
            assert_eq!(r.gap_sq, 0.0);
            assert!(r.d_hs_sq < 1e-20);
            assert!((r.s - 1.0).abs() < 1e-6, "{}", r.s);
            assert!((r.cov_a[(0, 0)] - (-r.t).exp()).abs() < 0.02 * (-r.t).exp());
            assert_eq!(r.cov_a, r.cov_c);
        }
        assert_eq!(tr.records.len(), 201);
    }

    #[test]
    fn coupled_runs_are_deterministic() {
        let p = gauss_problem(1);
        let s = Schedule::new(1e-2, 0.5);
        assert_eq!(run_coupled(&p, &s, 9, 3).unwrap(), run_coupled(&p, &s, 9, 3).unwrap());
        assert_ne!(run_coupled(&p, &s, 9, 3).unwrap().records[10].a, run_coupled(&p, &s, 9, 4).unwrap().records[10].a);
    }

    fn gauss_vs_uniform() -> (Arc<LogDensity>, Arc<LogDensity>) {
        let f = density(&DensitySpec::StandardGaussian, 1);
        let g = density(&body(Shape::Cube { side: 2.0 }), 1);
        (f, g)
    }

    #[test]
    fn domination_holds_along_a_run() {
        let (f, g) = gauss_vs_uniform();
        let sc = sup_convolution(&f, &g, 1000).unwrap();
        let p = CoupledProblem::new(&f, &g, &sc, Estimator::Quadrature { order: 1000 }).unwrap();
        let tr = run_coupled(&p, &Schedule::new(1e-2, 1.0).with_stride(25), 2, 0).unwrap();
        let xs: Vec<f64> = (0..41).map(|i| -3.0 + 0.15 * i as f64).collect();
        let ys: Vec<f64> = (0..161).map(|i| -4.0 + 0.05 * i as f64).collect();
        for r in &tr.records {
            let gap = domination_gap(r, &f, &g, &sc, &xs, &ys);
            assert!(gap >= -1e-9, "t = {} gap {gap}", r.t);
        }
        assert!(d_matrix_excess(&[tr]) <= 1e-8);
    }

    #[test]
    fn w2_of_scaled_gaussians() {
        let f = make_density(&DensitySpec::StandardGaussian, 1).unwrap();
        let aff = Affine { lin: DMatrix::from_element(1, 1, 0.5), shift: DVector::zeros(1) };
        let g = f.transformed(&aff).unwrap();
        let w = w2_1d(&f, &g).unwrap();
        assert!((w - 0.5).abs() < 2e-3, "{w}");
        assert!(w2_1d(&f, &f).unwrap() < 1e-12);
    }

    #[test]
    fn coupling_bound_is_valid_in_one_dimension() {
        let (f, g) = gauss_vs_uniform();
        let sc = sup_convolution(&f, &g, 1000).unwrap();
        let p = CoupledProblem::new(&f, &g, &sc, Estimator::Quadrature { order: 1000 }).unwrap();
        let runs = run_coupled_ensemble(&p, &Schedule::new(1e-2, 3.0).with_stride(50), 4, 40).unwrap();
        let w = wasserstein_coupling(&runs, 3.0, 1e-3, f64::INFINITY).unwrap();
        assert_eq!(w.kept, 40);
        let exact = w2_1d(&f, &g).unwrap();
        assert!(w.bound >= exact, "{} < {exact}", w.bound);
        assert!(matches!(wasserstein_coupling(&runs, 3.0, 0.5, 0.0), Err(Error::AllRunsExcluded)));
    }

    #[test]
    fn inputs_are_validated() {
        let f = Arc::new(make_isotropic(&body(Shape::Cube { side: 1.0 }), 1).unwrap());
        let shifted = density(&DensitySpec::UniformBody(BodySpec { shape: Shape::Cube { side: 1.0 }, center: Some(vec![0.3]) }), 1);
        let sc = sup_convolution(&f, &shifted, 32).unwrap();
        assert!(matches!(
            CoupledProblem::new(&f, &shifted, &sc, Estimator::Quadrature { order: 16 }),
            Err(Error::InvalidSpec(_))
        ));
        let g = density(&body(Shape::Cube { side: 1.0 }), 1);
        let sc = sup_convolution(&g, &g, 32).unwrap();
        assert!(matches!(
            CoupledProblem::new(&g, &g, &sc, Estimator::Quadrature { order: 16 }),
            Err(Error::AnisotropicInput(_))
        ));
    }

    #[test]
    fn drift_needs_enough_runs() {
        let p = gauss_problem(1);
        let runs = run_coupled_ensemble(&p, &Schedule::new(1e-2, 0.2), 1, 10).unwrap();
        assert!(matches!(drift_diagnostic(&runs, 0.1, 0.2), Err(Error::InsufficientRuns { .. })));
        let m = coupled_martingales(&runs).unwrap();
        assert_eq!(m.s_max_z, 0.0);
    }
}
