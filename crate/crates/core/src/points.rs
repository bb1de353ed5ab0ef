//! Weighted point measures: quadrature rules, Monte Carlo samples and particle
//! clouds all reduce to points with log-weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A finite measure `Σ exp(log_w_i) δ_{x_i}` in `R^dim`.
#[derive(Debug, Clone)]
pub struct PointMeasure {
    pub dim: usize,
    /// Row-major, `dim` coordinates per point.
    pub points: Vec<f64>,
    pub log_w: Vec<f64>,
}

/// Mass (in log form), mean and covariance of a weighted point set.
#[derive(Debug, Clone)]
pub struct RawMoments {
    pub log_mass: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_eff: f64,
}

impl PointMeasure {
    /// Equal-weight samples with total mass one.
    pub fn from_samples(dim: usize, points: Vec<f64>) -> Self {
        let n = points.len() / dim;
        let lw = -(n as f64).ln();
        PointMeasure { dim, points, log_w: vec![lw; n] }
    }

    /// Quadrature rule against a log-density; nodes where the density
    /// vanishes are dropped.
    pub fn from_rule(
        dim: usize,
        points: &[f64],
        weights: &[f64],
        log_density: impl Fn(&[f64]) -> f64,
    ) -> Self {
        let mut out_p = Vec::with_capacity(points.len());
        let mut out_w = Vec::with_capacity(weights.len());
        for (x, &w) in points.chunks_exact(dim).zip(weights) {
            let lf = log_density(x);
            if lf.is_finite() && w > 0.0 {
                out_p.extend_from_slice(x);
                out_w.push(w.ln() + lf);
            }
        }
        PointMeasure { dim, points: out_p, log_w: out_w }
    }

    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points.chunks_exact(self.dim).zip(self.log_w.iter().copied())
    }

    /// Apply `x ↦ L x + shift` to every point (weights unchanged: this is the
    /// pushforward).
    pub fn push_forward(&self, lin: &DMatrix<f64>, shift: &DVector<f64>) -> PointMeasure {
        let d = self.dim;
        let mut pts = Vec::with_capacity(self.points.len());
        for x in self.points.chunks_exact(d) {
            for i in 0..d {
                let mut s = shift[i];
                for j in 0..d {
                    s += lin[(i, j)] * x[j];
                }
                pts.push(s);
            }
        }
        PointMeasure { dim: d, points: pts, log_w: self.log_w.clone() }
    }

    /// Log-weights with an extra log-factor added, plus their maximum.
    pub fn tilted_log_weights(&self, extra: impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
        let mut lw = Vec::with_capacity(self.len());
        let mut max = f64::NEG_INFINITY;
        for (x, l) in self.iter() {
            let v = l + extra(x);
            if v > max {
                max = v;
            }
            lw.push(v);
        }
        (lw, max)
    }

    /// Normalized probabilities `p_i` and `log Σ w_i` (max-subtracted).
    pub fn normalize(log_w: &[f64], max: f64) -> Result<(Vec<f64>, f64)> {
        if !max.is_finite() {
            return Err(if max == f64::INFINITY { Error::QuadratureOverflow } else { Error::NonNormalizable(0.0) });
        }
        let mut p: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = p.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::NonNormalizable(s));
        }
        for v in &mut p {
            *v /= s;
        }
        Ok((p, max + s.ln()))
    }

    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let max = self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self::normalize(&self.log_w, max)?.0)
    }

    pub fn moments(&self) -> Result<RawMoments> {
        self.moments_tilted(|_| 0.0)
    }

    /// Moments of the measure reweighted by `exp(extra(x))`.
    pub fn moments_tilted(&self, extra: impl Fn(&[f64]) -> f64) -> Result<RawMoments> {
        let (lw, max) = self.tilted_log_weights(extra);
        let (p, log_mass) = Self::normalize(&lw, max)?;
        let (mean, cov) = weighted_mean_cov(self.dim, &self.points, &p);
        Ok(RawMoments { log_mass, mean, cov, n_eff: n_eff(&p) })
    }

    /// Mass of `{x : pred(x)}` relative to the total mass.
    pub fn fraction(&self, pred: impl Fn(&[f64]) -> bool) -> Result<f64> {
        let p = self.probabilities()?;
        Ok(self
            .points
            .chunks_exact(self.dim)
            .zip(&p)
            .filter(|(x, _)| pred(x))
            .map(|(_, w)| w)
            .sum())
    }

    /// Expectation of `g` under the normalized measure.
    pub fn expect(&self, g: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let p = self.probabilities()?;
        Ok(self.points.chunks_exact(self.dim).zip(&p).map(|(x, w)| w * g(x)).sum())
    }

    /// Normalized measure with tilt baked into the weights.
    pub fn reweighted(&self, extra: impl Fn(&[f64]) -> f64) -> PointMeasure {
        let (lw, _) = self.tilted_log_weights(extra);
        PointMeasure { dim: self.dim, points: self.points.clone(), log_w: lw }
    }
}

pub fn weighted_mean_cov(dim: usize, points: &[f64], p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    match dim {
        1 => mean_cov_fixed::<1>(points, p),
        2 => mean_cov_fixed::<2>(points, p),
        3 => mean_cov_fixed::<3>(points, p),
        _ => mean_cov_dyn(dim, points, p),
    }
}

/// Same accumulation order as `mean_cov_dyn`, with the loops unrolled.
fn mean_cov_fixed<const D: usize>(points: &[f64], p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = [0.0; D];
    for (x, &w) in points.chunks_exact(D).zip(p) {
        for i in 0..D {
            mean[i] += w * x[i];
        }
    }
    let mut cov = [[0.0; D]; D];
    let mut d = [0.0; D];
    for (x, &w) in points.chunks_exact(D).zip(p) {
        if w == 0.0 {
            continue;
        }
        for i in 0..D {
            d[i] = x[i] - mean[i];
        }
        for i in 0..D {
            let wi = w * d[i];
            for j in i..D {
                cov[i][j] += wi * d[j];
            }
        }
    }
    let m = DMatrix::from_fn(D, D, |i, j| if i <= j { cov[i][j] } else { cov[j][i] });
    (DVector::from_column_slice(&mean), m)
}

fn mean_cov_dyn(dim: usize, points: &[f64], p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = DVector::zeros(dim);
    for (x, &w) in points.chunks_exact(dim).zip(p) {
        for i in 0..dim {
            mean[i] += w * x[i];
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    let mut d = vec![0.0; dim];
    for (x, &w) in points.chunks_exact(dim).zip(p) {
        if w == 0.0 {
            continue;
        }
        for i in 0..dim {
            d[i] = x[i] - mean[i];
        }
        for i in 0..dim {
            let wi = w * d[i];
            for j in i..dim {
                cov[(i, j)] += wi * d[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    (mean, cov)
}

/// `(Σp)² / Σp²` for normalized probabilities.
pub fn n_eff(p: &[f64]) -> f64 {
    let s2: f64 = p.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        1.0 / s2
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_cloud_moments() {
        let m = PointMeasure::from_samples(1, vec![-1.0, 1.0]);
        let r = m.moments().unwrap();
        assert!(r.mean[0].abs() < 1e-15);
        assert!((r.cov[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((r.n_eff - 2.0).abs() < 1e-12);
        assert!(r.log_mass.abs() < 1e-15);
    }

    #[test]
    fn large_tilt_does_not_overflow() {
        let m = PointMeasure::from_samples(1, vec![0.0, 1.0, 2.0]);
        let r = m.moments_tilted(|x| 1e4 * x[0]).unwrap();
        assert!((r.mean[0] - 2.0).abs() < 1e-12);
        assert!(r.log_mass > 1e4);
    }

    #[test]
    fn unrolled_moments_match_generic() {
        let pts: Vec<f64> = (0..60).map(|i| ((i * 37 % 17) as f64).sin()).collect();
        for d in 1..=3 {
            let k = pts.len() / d;
            let p: Vec<f64> = (0..k).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 + i as f64 }).collect();
            let (m1, c1) = weighted_mean_cov(d, &pts[..k * d], &p);
            let (m2, c2) = mean_cov_dyn(d, &pts[..k * d], &p);
            assert_eq!(m1, m2);
            assert_eq!(c1, c2);
        }
    }

    #[test]
    fn empty_measure_is_not_normalizable() {
        let m = PointMeasure { dim: 1, points: vec![], log_w: vec![] };
        assert!(m.moments().is_err());
    }
}
