//! Spectral diagnostics of localization runs and the checks built on them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize};

use crate::engine::{StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{op_norm_sym, sym_eigen, sym_inv_sqrt};
use crate::points::PointMeasure;
use crate::stats::{bootstrap_ci, mean_se, quantile, slope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Report,
}

impl Status {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// One entry of a summary: a statistic, an optional interval and a verdict.
/// Non-finite values are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    #[serde(deserialize_with = "null_as_nan")]
    pub value: f64,
    pub ci: Option<[f64; 2]>,
    pub status: Status,
}

impl Check {
    pub fn pass(value: f64, ok: bool) -> Self {
        Check { value, ci: None, status: Status::from_bool(ok) }
    }

    pub fn report(value: f64) -> Self {
        Check { value, ci: None, status: Status::Report }
    }

    pub fn with_ci(mut self, lo: f64, hi: f64) -> Self {
        self.ci = Some([lo, hi]);
        self
    }
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub type Summary = BTreeMap<String, Check>;

pub fn all_pass(s: &Summary) -> bool {
    s.values().all(|c| c.status != Status::Fail)
}

/// `Ã_t = A_t + ∫₀ᵗ A_s ds`.
pub fn companion(r: &StepRecord) -> DMatrix<f64> {
    r.atilde()
}

/// Orthonormal eigenbasis of `Ã_t`, eigenvalues decreasing.
pub fn xi_basis(r: &StepRecord) -> DMatrix<f64> {
    sym_eigen(&companion(r)).vectors
}

/// `ξ_{i,j} = E[⟨y,v_i⟩⟨y,v_j⟩ y]` for the whitened measure `y = A^{-1/2}(x − a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct XiTensor {
    pub t: f64,
    pub basis: DMatrix<f64>,
    pub xi: Vec<DVector<f64>>,
}

impl XiTensor {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.xi[i * self.dim() + j]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut w: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                w = w.max((self.get(i, j) - self.get(j, i)).amax());
            }
        }
        w
    }

    pub fn max_abs(&self) -> f64 {
        self.xi.iter().map(|v| v.amax()).fold(0.0, f64::max)
    }
}

fn whitened(pm: &PointMeasure, a: &DVector<f64>, cov: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    crate::linalg::check_floor(cov)?;
    let m = sym_inv_sqrt(cov);
    let w = pm.push_forward(&m, &(-(&m * a)));
    let p = w.probabilities()?;
    Ok((w.points, p))
}

fn check_basis(basis: &DMatrix<f64>) -> Result<()> {
    let n = basis.nrows();
    let dev = (basis.transpose() * basis - DMatrix::identity(n, n)).amax();
    if dev > 1e-8 {
        return Err(Error::InvalidSpec(format!("basis is not orthonormal (deviation {dev:.2e})")));
    }
    Ok(())
}

pub fn xi_vectors(pm: &PointMeasure, a: &DVector<f64>, cov: &DMatrix<f64>, basis: &DMatrix<f64>, t: f64) -> Result<XiTensor> {
    check_basis(basis)?;
    let n = pm.dim;
    let (pts, p) = whitened(pm, a, cov)?;
    let mut xi = vec![DVector::zeros(n); n * n];
    let mut proj = vec![0.0; n];
    for (y, w) in pts.chunks_exact(n).zip(&p) {
        for (i, pi) in proj.iter_mut().enumerate() {
            *pi = (0..n).map(|k| basis[(k, i)] * y[k]).sum();
        }
        for i in 0..n {
            for j in i..n {
                let c = w * proj[i] * proj[j];
                let v = &mut xi[i * n + j];
                for k in 0..n {
                    v[k] += c * y[k];
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            xi[i * n + j] = xi[j * n + i].clone();
        }
    }
    Ok(XiTensor { t, basis: basis.clone(), xi })
}

/// `E⟨y,v_i⟩⁴` and `‖E[y⊗y⟨y,v_i⟩]‖²_HS` of the whitened measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FourthMoments {
    pub t: f64,
    pub m4: Vec<f64>,
    pub hs: Vec<f64>,
}

pub fn fourth_moments(pm: &PointMeasure, a: &DVector<f64>, cov: &DMatrix<f64>, basis: &DMatrix<f64>, t: f64) -> Result<FourthMoments> {
    check_basis(basis)?;
    let n = pm.dim;
    let (pts, p) = whitened(pm, a, cov)?;
    let mut m4 = vec![0.0; n];
    let mut mats = vec![DMatrix::<f64>::zeros(n, n); n];
    for (y, w) in pts.chunks_exact(n).zip(&p) {
        for i in 0..n {
            let pi: f64 = (0..n).map(|k| basis[(k, i)] * y[k]).sum();
            m4[i] += w * pi.powi(4);
            for r in 0..n {
                for c in 0..n {
                    mats[i][(r, c)] += w * y[r] * y[c] * pi;
                }
            }
        }
    }
    Ok(FourthMoments { t, m4, hs: mats.iter().map(|m| m.norm_squared()).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiBounds {
    pub t: f64,
    /// `(|ξ_{i,i}|, √E⟨y,v_i⟩⁴)`.
    pub diagonal: Vec<(f64, f64)>,
    pub row_sums: Vec<f64>,
    /// Largest `|Σ_j|ξ_{i,j}|² − ‖E[y⊗y⟨y,v_i⟩]‖²_HS|`.
    pub identity_gap: f64,
    pub pass: bool,
}

pub fn check_xi_bounds(xi: &XiTensor, fourth: &FourthMoments) -> Result<XiBounds> {
    if (xi.t - fourth.t).abs() > 1e-12 {
        return Err(Error::InconsistentTime(xi.t, fourth.t));
    }
    let n = xi.dim();
    let diagonal: Vec<(f64, f64)> = (0..n).map(|i| (xi.get(i, i).norm(), fourth.m4[i].sqrt())).collect();
    let row_sums: Vec<f64> = (0..n).map(|i| (0..n).map(|j| xi.get(i, j).norm_squared()).sum()).collect();
    let identity_gap = row_sums.iter().zip(&fourth.hs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = diagonal.iter().all(|(x, b)| *x <= b * (1.0 + 1e-12) + 1e-14);
    Ok(XiBounds { t: xi.t, diagonal, row_sums, identity_gap, pass })
}

/// Records at common times across runs, truncated to the shortest run.
fn aligned(runs: &[Trajectory], min_runs: usize) -> Result<(Vec<f64>, usize)> {
    if runs.len() < min_runs {
        return Err(Error::InsufficientRuns { got: runs.len(), need: min_runs });
    }
    let len = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let times: Vec<f64> = runs[0].records[..len].iter().map(|r| r.t).collect();
    for run in runs {
        for (r, t) in run.records.iter().zip(&times) {
            if (r.t - t).abs() > 1e-9 {
                return Err(Error::InconsistentTime(r.t, *t));
            }
        }
    }
    Ok((times, len))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceIdentity {
    pub n: usize,
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub mean_trace_a: Vec<f64>,
    /// Largest `|mean − n| / se` (se floored at `1e-9·n`).
    pub max_z: f64,
    pub pass: bool,
}

/// Across runs, `E[Tr Ã_t] = n` at every recorded time.
pub fn trace_identity_check(runs: &[Trajectory]) -> Result<TraceIdentity> {
    let (times, len) = aligned(runs, 30)?;
    let n = runs[0].dim;
    let (mut mean, mut se, mut mta) = (vec![], vec![], vec![]);
    let mut pass = true;
    let mut max_z: f64 = 0.0;
    for k in 0..len {
        let tr: Vec<f64> = runs.iter().map(|r| r.records[k].trace_atilde()).collect();
        let ta: Vec<f64> = runs.iter().map(|r| r.records[k].cov.trace()).collect();
        let (m, s) = mean_se(&tr);
        let tol = 3.0 * s + 1e-9 * n as f64;
        pass &= (m - n as f64).abs() <= tol;
        max_z = max_z.max((m - n as f64).abs() / s.max(1e-9 * n as f64));
        mean.push(m);
        se.push(s);
        mta.push(ta.iter().sum::<f64>() / ta.len() as f64);
    }
    Ok(TraceIdentity { n, t: times, mean, se, mean_trace_a: mta, max_z, pass })
}

pub fn trace_power(r: &StepRecord, p: u32) -> f64 {
    sym_eigen(&r.atilde()).values.iter().map(|l| l.powi(p as i32)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerDrift {
    pub p: u32,
    /// Interval start times.
    pub t: Vec<f64>,
    /// Across-run mean of `ΔS/Δt` per interval with a bootstrap interval.
    pub drift: Vec<f64>,
    pub ci: Vec<[f64; 2]>,
    /// `p²·E[κ² S]` at the interval start.
    pub bound: Vec<f64>,
    pub pass: bool,
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Drift of `S_t = Tr(Ã_t^p)` against `p²κ²S_t`, on intervals of `stride`
/// records. For `p = 1` the drift must be statistically zero.
pub fn trace_power_drift(runs: &[Trajectory], p: u32, stride: usize, tol: f64, seed: u64) -> Result<PowerDrift> {
    let (times, len) = aligned(runs, 30)?;
    if p == 0 {
        return Err(Error::InvalidSpec("p must be positive".into()));
    }
    let stride = stride.max(1);
    let pf = f64::from(p);
    let (mut ts, mut drift, mut ci, mut bound) = (vec![], vec![], vec![], vec![]);
    let mut pass = true;
    let mut k = 0;
    while k + stride < len {
        let dt = times[k + stride] - times[k];
        let inc: Vec<f64> = runs
            .iter()
            .map(|r| (trace_power(&r.records[k + stride], p) - trace_power(&r.records[k], p)) / dt)
            .collect();
        let (m, _) = mean_se(&inc);
        let (lo, hi) = bootstrap_ci(&inc, |v| v.iter().sum::<f64>() / v.len() as f64, BOOTSTRAP_RESAMPLES, 0.99, seed ^ k as u64);
        let b = if p == 1 {
            0.0
        } else {
            let vals = runs
                .iter()
                .map(|r| {
                    let rec = &r.records[k];
                    let kappa = rec.kappa.ok_or_else(|| Error::TensorEstimationFailure("runs carry no κ".into()))?;
                    Ok(kappa * kappa * trace_power(rec, p))
                })
                .collect::<Result<Vec<f64>>>()?;
            pf * pf * vals.iter().sum::<f64>() / vals.len() as f64
        };
        let eps = 1e-9 * runs[0].dim as f64;
        pass &= if p == 1 { lo <= eps && hi >= -eps } else { lo <= b * (1.0 + tol) };
        ts.push(times[k]);
        drift.push(m);
        ci.push([lo, hi]);
        bound.push(b);
        k += stride;
    }
    Ok(PowerDrift { p, t: ts, drift, ci, bound, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope {
    pub t: Vec<f64>,
    /// Across-run 99th percentile of `‖A_t‖_OP`.
    pub q99: Vec<f64>,
    pub burn_in: f64,
    /// Least-squares decay rate of `ln q99` after the burn-in.
    pub rate: f64,
    /// Fraction of consecutive post-burn-in grid points with a non-increasing
    /// envelope.
    pub decreasing_fraction: f64,
    pub pass: bool,
}

/// Burn-in `1/(κ² log n)`, or `fallback` when that is undefined.
pub fn burn_in(kappa: f64, n: usize, fallback: f64) -> f64 {
    let d = kappa * kappa * (n as f64).ln();
    if d > 0.0 && d.is_finite() {
        1.0 / d
    } else {
        fallback
    }
}

pub fn opnorm_envelope(runs: &[Trajectory], burn: f64) -> Result<Envelope> {
    let (times, len) = aligned(runs, 30)?;
    let q99: Vec<f64> = (0..len)
        .map(|k| quantile(&runs.iter().map(|r| r.records[k].op_norm()).collect::<Vec<_>>(), 0.99))
        .collect();
    let after: Vec<usize> = (0..len).filter(|&k| times[k] >= burn - 1e-12).collect();
    let (rate, frac) = if after.len() >= 2 {
        let x: Vec<f64> = after.iter().map(|&k| times[k]).collect();
        let y: Vec<f64> = after.iter().map(|&k| q99[k].ln()).collect();
        let dec = after.windows(2).filter(|w| q99[w[1]] <= q99[w[0]] * (1.0 + 1e-12)).count();
        (-slope(&x, &y), dec as f64 / (after.len() - 1) as f64)
    } else {
        (f64::NAN, 1.0)
    };
    Ok(Envelope { t: times, q99, burn_in: burn, rate, decreasing_fraction: frac, pass: frac >= 0.95 })
}

/// Smallest eigenvalue of `Ã_t − A_t = ∫A` over all records.
pub fn atilde_domination(runs: &[Trajectory]) -> f64 {
    runs.iter()
        .flat_map(|r| r.records.iter())
        .map(|r| sym_eigen(&r.int_a).min())
        .fold(f64::INFINITY, f64::min)
}

/// Largest `‖A_t‖_OP · λ_min(B_t)` over records with `t > 0`.
pub fn brascamp_lieb_ceiling(runs: &[Trajectory]) -> f64 {
    runs.iter()
        .flat_map(|r| r.records.iter())
        .filter(|r| r.t > 0.0)
        .map(|r| r.op_norm() * sym_eigen(&r.b).min())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeMartingale {
    pub t: Vec<f64>,
    /// Per probe point: mean and standard error of `F_t(x₀)` over runs.
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    /// Largest `|mean − 1| / se` over all records and probes. Pointwise
    /// bands are not simultaneous, so this is descriptive only.
    pub max_z: f64,
    /// Largest `|mean − 1| / se` over probes at the last common record.
    pub final_z: f64,
    pub pass: bool,
}

/// Across runs, `E[F_t(x₀)] = 1` at each probe; asserted at the last record.
pub fn probe_martingale(runs: &[Trajectory]) -> Result<ProbeMartingale> {
    let (times, len) = aligned(runs, 2)?;
    let probes = runs[0].records[0].probes.len();
    let (mut mean, mut se) = (vec![vec![]; probes], vec![vec![]; probes]);
    let (mut max_z, mut final_z) = (0.0f64, 0.0f64);
    for k in 0..len {
        for j in 0..probes {
            let v: Vec<f64> = runs.iter().map(|r| r.records[k].probes[j]).collect();
            let (m, s) = mean_se(&v);
            let z = z_score(m, s);
            max_z = max_z.max(z);
            if k + 1 == len {
                final_z = final_z.max(z);
            }
            mean[j].push(m);
            se[j].push(s);
        }
    }
    Ok(ProbeMartingale { t: times, mean, se, max_z, final_z, pass: final_z <= 3.0 })
}

/// `|m − 1| / se`, with rounding noise (identical runs at `t = 0`) read as 0.
fn z_score(m: f64, se: f64) -> f64 {
    let dev = (m - 1.0).abs();
    if dev > 1e-12 {
        dev / se.max(1e-9)
    } else {
        0.0
    }
}

/// Largest `|∫f_t − 1|` on the reference rule over all records.
pub fn mass_deviation(runs: &[Trajectory]) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for r in runs.iter().flat_map(|r| r.records.iter()) {
        if let Some(m) = r.mass {
            worst = Some(worst.unwrap_or(0.0).max((m - 1.0).abs()));
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarycenterQv {
    pub window: f64,
    /// Per window start, largest entrywise relative gap between averaged
    /// realized covariation of `a` and averaged `∫A`.
    pub t: Vec<f64>,
    pub rel_gap: Vec<f64>,
    pub max_rel_gap: f64,
    pub pass: bool,
}

/// Realized quadratic covariation of `a_t` over windows of width `window`
/// against `∫A ds`, averaged over runs. Entries are compared relative to the
/// largest entry of `∫A`.
pub fn barycenter_qv(runs: &[Trajectory], window: f64, tol: f64) -> Result<BarycenterQv> {
    let (times, len) = aligned(runs, 2)?;
    let n = runs[0].dim;
    let (mut ts, mut gaps) = (vec![], vec![]);
    let mut k0 = 0;
    while k0 < len {
        let Some(k1) = (k0..len).find(|&k| times[k] >= times[k0] + window - 1e-9) else { break };
        let mut qv = DMatrix::<f64>::zeros(n, n);
        let mut ia = DMatrix::<f64>::zeros(n, n);
        for r in runs {
            for k in k0..k1 {
                let d = &r.records[k + 1].a - &r.records[k].a;
                qv += &d * d.transpose();
            }
            ia += &r.records[k1].int_a - &r.records[k0].int_a;
        }
        let scale = ia.amax();
        ts.push(times[k0]);
        gaps.push((qv - &ia).amax() / scale);
        k0 = k1;
    }
    let max_rel_gap = gaps.iter().copied().fold(0.0, f64::max);
    Ok(BarycenterQv { window, t: ts, rel_gap: gaps, max_rel_gap, pass: max_rel_gap <= tol })
}

/// Largest `‖A_t − e^{-t}Id‖_OP / e^{-t}` over all records.
pub fn gaussian_cov_error(runs: &[Trajectory]) -> f64 {
    runs.iter()
        .flat_map(|r| r.records.iter())
        .map(|r| {
            let n = r.cov.nrows();
            let e = (-r.t).exp();
            op_norm_sym(&(&r.cov - DMatrix::identity(n, n) * e)) / e
        })
        .fold(0.0, f64::max)
}

/// Largest `‖B_t − (e^t − 1)Id‖_OP / (e^t − 1)` over records with `t > 0`.
pub fn gaussian_b_error(runs: &[Trajectory]) -> f64 {
    runs.iter()
        .flat_map(|r| r.records.iter())
        .filter(|r| r.t > 0.0)
        .map(|r| {
            let n = r.b.nrows();
            let e = r.t.exp_m1();
            op_norm_sym(&(&r.b - DMatrix::identity(n, n) * e)) / e
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::constants::{represent, Estimator};
    use crate::engine::{run_ensemble, Observers, PathSpec, Schedule};
    use crate::measures::{make_density, make_isotropic, DensitySpec, Factor1d};
    use crate::tilt::MomentStrategy;

    fn measure(spec: &DensitySpec, n: usize) -> PointMeasure {
        represent(&make_isotropic(spec, n).unwrap(), Estimator::Quadrature { order: 64 }).unwrap()
    }

    fn expo() -> DensitySpec {
        DensitySpec::Product1d { factors: vec![Factor1d::Exponential] }
    }

    fn iso(n: usize) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::zeros(n), DMatrix::identity(n, n))
    }

    #[test]
    fn xi_vanishes_for_symmetric() {
        let pm = measure(&DensitySpec::StandardGaussian, 2);
        let (a, c) = iso(2);
        let xi = xi_vectors(&pm, &a, &c, &DMatrix::identity(2, 2), 0.0).unwrap();
        assert!(xi.max_abs() < 1e-10);
        let f4 = fourth_moments(&pm, &a, &c, &DMatrix::identity(2, 2), 0.0).unwrap();
        let r = check_xi_bounds(&xi, &f4).unwrap();
        assert!(r.pass);
        assert!((r.diagonal[0].1 - 3f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn xi_of_exponentials() {
        let pm = measure(&expo(), 1);
        let (a, c) = iso(1);
        let xi = xi_vectors(&pm, &a, &c, &DMatrix::identity(1, 1), 0.0).unwrap();
        assert!((xi.get(0, 0)[0] - 2.0).abs() < 0.04);
        let f4 = fourth_moments(&pm, &a, &c, &DMatrix::identity(1, 1), 0.0).unwrap();
        let r = check_xi_bounds(&xi, &f4).unwrap();
        assert!(r.pass && (r.diagonal[0].1 - 3.0).abs() < 0.05, "{r:?}");

        let pm = measure(&expo(), 3);
        let (a, c) = iso(3);
        let xi = xi_vectors(&pm, &a, &c, &DMatrix::identity(3, 3), 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v = xi.get(i, j);
                if i == j {
                    assert!((v[i] - 2.0).abs() < 0.04);
                    assert!(v.iter().enumerate().all(|(k, x)| k == i || x.abs() < 1e-8));
                } else {
                    assert!(v.amax() < 1e-8);
                }
            }
        }
        assert!(xi.max_asymmetry() < 1e-10);
        let f4 = fourth_moments(&pm, &a, &c, &DMatrix::identity(3, 3), 0.0).unwrap();
        assert!(check_xi_bounds(&xi, &f4).unwrap().identity_gap < 1e-10);
    }

    #[test]
    fn row_sum_identity_in_rotated_basis() {
        let pm = measure(&expo(), 2);
        let (a, c) = iso(2);
        let th = 0.4f64;
        let u = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let xi = xi_vectors(&pm, &a, &c, &u, 0.0).unwrap();
        let f4 = fourth_moments(&pm, &a, &c, &u, 0.0).unwrap();
        let r = check_xi_bounds(&xi, &f4).unwrap();
        assert!(r.identity_gap < 1e-10 && r.pass);
    }

    #[test]
    fn xi_rejects_bad_basis_and_time() {
        let pm = measure(&DensitySpec::StandardGaussian, 1);
        let (a, c) = iso(1);
        assert!(xi_vectors(&pm, &a, &c, &DMatrix::from_element(1, 1, 2.0), 0.0).is_err());
        let xi = xi_vectors(&pm, &a, &c, &DMatrix::identity(1, 1), 0.0).unwrap();
        let f4 = fourth_moments(&pm, &a, &c, &DMatrix::identity(1, 1), 0.5).unwrap();
        assert!(matches!(check_xi_bounds(&xi, &f4), Err(Error::InconsistentTime(..))));
    }

    fn gauss_runs(n: usize, runs: u64) -> Vec<Trajectory> {
        let f = Arc::new(make_density(&DensitySpec::StandardGaussian, n).unwrap());
        let path = PathSpec::Tilt { strategy: MomentStrategy::ClosedFormGaussian };
        let obs = Observers { kappa: false, ..Default::default() };
        run_ensemble(&f, &path, &Schedule::new(1e-3, 2.0).with_stride(100), 11, runs, &obs).unwrap()
    }

    #[test]
    fn gaussian_trace_identity_is_exact() {
        let runs = gauss_runs(2, 30);
        let r = trace_identity_check(&runs).unwrap();
        assert!(r.pass);
        assert!(r.mean.iter().all(|m| (m - 2.0).abs() < 1e-9));
        assert_eq!(r.mean[0], 2.0);
        assert!(gaussian_cov_error(&runs) < 1e-3);
        let eb = gaussian_b_error(&runs);
        assert!(eb < 2e-3, "{eb}");
        assert!(atilde_domination(&runs) >= 0.0);
        assert!(brascamp_lieb_ceiling(&runs) <= 1.0 + 1e-9);
        assert!(matches!(trace_identity_check(&runs[..10]), Err(Error::InsufficientRuns { .. })));
    }

    #[test]
    fn probe_rounding_at_start_is_not_a_deviation() {
        let f = Arc::new(make_density(&DensitySpec::StandardGaussian, 1).unwrap());
        let path = PathSpec::Tilt { strategy: MomentStrategy::ClosedFormGaussian };
        let obs = Observers { probes: vec![DVector::zeros(1)], ..Default::default() };
        let mut runs = run_ensemble(&f, &path, &Schedule::new(1e-2, 0.5).with_stride(10), 4, 40, &obs).unwrap();
        for (i, r) in runs.iter_mut().enumerate() {
            r.records[0].probes[0] = 1.0 + if i % 2 == 0 { 2e-16 } else { 0.0 };
        }
        let pm = probe_martingale(&runs).unwrap();
        assert!(pm.max_z < 3.0, "{}", pm.max_z);
        for r in runs.iter_mut() {
            r.records[0].probes[0] = 1.01;
        }
        let pm = probe_martingale(&runs).unwrap();
        assert!(pm.max_z > 3.0 && pm.final_z < 3.0 && pm.pass);
    }

    #[test]
    fn gaussian_envelope_is_exponential() {
        let runs = gauss_runs(2, 30);
        let e = opnorm_envelope(&runs, burn_in(0.0, 2, 0.5)).unwrap();
        assert_eq!(e.q99[0], 1.0);
        assert!(e.pass);
        assert!((e.rate - 1.0).abs() < 1e-3, "{}", e.rate);
        for (t, q) in e.t.iter().zip(&e.q99) {
            assert!((q - (-t).exp()).abs() < 1e-3 * (-t).exp());
        }
    }

    #[test]
    fn drift_p1_zero_on_gaussian() {
        let runs = gauss_runs(2, 30);
        let d = trace_power_drift(&runs, 1, 1, 0.1, 0).unwrap();
        assert!(d.pass);
        assert!(d.drift.iter().all(|v| v.abs() < 1e-6));
        assert!(matches!(trace_power_drift(&runs, 2, 1, 0.1, 0), Err(Error::TensorEstimationFailure(_))));
    }

    #[test]
    fn burn_in_rule() {
        assert!((burn_in(2.0, 3, 0.5) - 1.0 / (4.0 * 3f64.ln())).abs() < 1e-15);
        assert_eq!(burn_in(0.0, 3, 0.5), 0.5);
        assert_eq!(burn_in(2.0, 1, 0.5), 0.5);
    }

    #[test]
    fn checks_serialize() {
        let mut s = Summary::new();
        s.insert("a".into(), Check::pass(1.0, true).with_ci(0.5, 1.5));
        s.insert("b".into(), Check::report(2.0));
        assert!(all_pass(&s));
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"a":{"value":1.0,"ci":[0.5,1.5],"status":"pass"},"b":{"value":2.0,"ci":null,"status":"report"}}"#);
        s.insert("c".into(), Check::pass(0.0, false));
        assert!(!all_pass(&s));
    }
}
