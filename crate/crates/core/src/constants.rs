//! Per-measure analogues of the thin-shell, K and quadratic Poincaré
//! constants.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_floor, op_norm_sym, sym_eigen, sym_inv_sqrt, symmetrize};
use crate::measures::{exact_moments, LogDensity, MAX_GRID_DIM};
use crate::points::PointMeasure;
use crate::stats::median;

/// How moment tensors of a density are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Estimator {
    Quadrature { order: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl Estimator {
    /// Quadrature when the dimension allows it, a million samples otherwise.
    pub fn auto(dim: usize, seed: u64) -> Self {
        if dim <= MAX_GRID_DIM {
            Estimator::Quadrature { order: 64 }
        } else {
            Estimator::MonteCarlo { samples: 1_000_000, seed }
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Estimator::Quadrature { .. })
    }
}

/// Weighted representation of `f` for moment statistics.
pub fn represent(f: &LogDensity, est: Estimator) -> Result<PointMeasure> {
    match est {
        Estimator::Quadrature { order } => {
            let pm = match f.split_rule(&vec![0.0; f.dim], order)? {
                Some(pm) => pm,
                None => f.rule(order)?,
            };
            let p = pm.probabilities()?;
            Ok(PointMeasure { dim: pm.dim, points: pm.points, log_w: p.iter().map(|v| v.ln()).collect() })
        }
        Estimator::MonteCarlo { samples, seed } => {
            if !f.has_sampler() {
                return Err(Error::NoSampler);
            }
            Ok(PointMeasure::from_samples(f.dim, f.sample_many(samples, seed)?))
        }
    }
}

/// The pushforward of `pm` under `y = A^{-1/2}(x − a)`.
pub fn whiten(pm: &PointMeasure, a: &DVector<f64>, cov: &DMatrix<f64>) -> Result<PointMeasure> {
    check_floor(cov)?;
    let m = sym_inv_sqrt(cov);
    let shift = -(&m * a);
    Ok(pm.push_forward(&m, &shift))
}

/// Whitened with its own moments.
pub fn self_whiten(pm: &PointMeasure) -> Result<PointMeasure> {
    let m = pm.moments()?;
    whiten(pm, &m.mean, &m.cov)
}

/// `T_{ijk} = E[X_i X_j X_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThirdMoments {
    pub dim: usize,
    pub t: Vec<f64>,
}

impl ThirdMoments {
    pub fn of(pm: &PointMeasure) -> Result<Self> {
        let n = pm.dim;
        let p = pm.probabilities()?;
        let mut t = vec![0.0; n * n * n];
        for (x, w) in pm.points.chunks_exact(n).zip(&p) {
            for i in 0..n {
                let wi = w * x[i];
                for j in i..n {
                    let wij = wi * x[j];
                    for k in j..n {
                        t[(i * n + j) * n + k] += wij * x[k];
                    }
                }
            }
        }
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    let v = t[(i * n + j) * n + k];
                    for (a, b, c) in [(i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                        t[(a * n + b) * n + c] = v;
                    }
                }
            }
        }
        Ok(ThirdMoments { dim: n, t })
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.t[(i * self.dim + j) * self.dim + k]
    }

    /// `E[X ⊗ X ⟨X, θ⟩]`.
    pub fn contract(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |i, j| (0..n).map(|k| self.get(i, j, k) * theta[k]).sum())
    }

    /// `G_{kl} = Σ_{ij} T_{ijk} T_{ijl}`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |k, l| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += self.get(i, j, k) * self.get(i, j, l);
                }
            }
            s
        })
    }

    /// Largest deviation from full index symmetry.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let v = self.get(i, j, k);
                    for w in [self.get(j, i, k), self.get(i, k, j), self.get(k, j, i)] {
                        worst = worst.max((v - w).abs());
                    }
                }
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.t.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KStat {
    pub kappa: f64,
    /// Maximizing direction.
    pub theta: Vec<f64>,
}

pub fn k_stat_from(t: &ThirdMoments) -> KStat {
    let e = sym_eigen(&t.gram());
    KStat { kappa: e.values[0].max(0.0).sqrt(), theta: e.vectors.column(0).iter().copied().collect() }
}

/// κ of the measure `pm` after whitening by `(a, cov)`.
pub fn k_stat_of(pm: &PointMeasure, a: &DVector<f64>, cov: &DMatrix<f64>) -> Result<KStat> {
    let w = whiten(pm, a, cov).map_err(|e| Error::TensorEstimationFailure(e.to_string()))?;
    Ok(k_stat_from(&ThirdMoments::of(&w)?))
}

/// `sup_θ ‖T(·,·,θ)‖_HS` by direct search over a grid of unit vectors.
pub fn k_stat_grid(t: &ThirdMoments, resolution: usize) -> Result<f64> {
    let hs = |th: &DVector<f64>| t.contract(th).norm();
    match t.dim {
        1 => Ok(t.get(0, 0, 0).abs()),
        2 => Ok((0..resolution)
            .map(|i| {
                let a = std::f64::consts::PI * i as f64 / resolution as f64;
                hs(&DVector::from_vec(vec![a.cos(), a.sin()]))
            })
            .fold(0.0, f64::max)),
        3 => {
            let mut best: f64 = 0.0;
            for i in 0..=resolution {
                let polar = std::f64::consts::PI * i as f64 / resolution as f64;
                let ring = ((2 * resolution) as f64 * polar.sin()).ceil().max(1.0) as usize;
                for j in 0..ring {
                    let az = 2.0 * std::f64::consts::PI * j as f64 / ring as f64;
                    let th = DVector::from_vec(vec![polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()]);
                    best = best.max(hs(&th));
                }
            }
            Ok(best)
        }
        n => Err(Error::GridDimensionTooHigh { dim: n, max: 3 }),
    }
}

/// Largest deviation of `(mean, cov)` from isotropy.
pub fn isotropy_defect(pm: &PointMeasure) -> Result<f64> {
    let m = pm.moments()?;
    let n = pm.dim;
    Ok(op_norm_sym(&(m.cov - DMatrix::identity(n, n))).max(m.mean.amax()))
}

fn check_isotropic(pm: &PointMeasure, tol: f64) -> Result<()> {
    let d = isotropy_defect(pm)?;
    if d > tol {
        return Err(Error::AnisotropicInput(d));
    }
    Ok(())
}

/// Isotropy tolerance suited to an estimator.
pub fn isotropy_tolerance(pm: &PointMeasure, exact: bool) -> f64 {
    if exact {
        1e-6
    } else {
        8.0 * (pm.dim as f64).sqrt() / (pm.len() as f64).sqrt()
    }
}

/// κ of an isotropic measure.
pub fn k_stat(pm: &PointMeasure, iso_tol: f64) -> Result<KStat> {
    check_isotropic(pm, iso_tol)?;
    let w = self_whiten(pm).map_err(|e| Error::TensorEstimationFailure(e.to_string()))?;
    Ok(k_stat_from(&ThirdMoments::of(&w)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThinShell {
    /// `E[(|X| − √n)²]`.
    pub s_sq: f64,
    pub s: f64,
    /// Half-width of a 95% jackknife interval on `s_sq` (0 for quadrature).
    pub ci: f64,
    /// `(k, s_k²)`, each the median over random coordinate subspaces.
    pub ladder: Vec<(usize, f64)>,
}

const SUBSPACE_DRAWS: usize = 10;
const JACKKNIFE_BLOCKS: usize = 20;

/// Half-width of a 95% delete-one-block jackknife interval for `E[g]`.
fn jackknife_mean_ci(values: &[f64], p: &[f64]) -> f64 {
    let len = values.len();
    let blocks = JACKKNIFE_BLOCKS.min(len);
    let total: f64 = values.iter().zip(p).map(|(v, w)| v * w).sum();
    let mass: f64 = p.iter().sum();
    let mut ests = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let (lo, hi) = (b * len / blocks, (b + 1) * len / blocks);
        let s: f64 = values[lo..hi].iter().zip(&p[lo..hi]).map(|(v, w)| v * w).sum();
        let m: f64 = p[lo..hi].iter().sum();
        ests.push((total - s) / (mass - m));
    }
    let mean = ests.iter().sum::<f64>() / blocks as f64;
    let var = (blocks as f64 - 1.0) / blocks as f64 * ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
    1.96 * var.sqrt()
}

fn shell_deviation(pm: &PointMeasure, p: &[f64], coords: &[usize]) -> f64 {
    let r = (coords.len() as f64).sqrt();
    pm.points
        .chunks_exact(pm.dim)
        .zip(p)
        .map(|(x, w)| w * (coords.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt() - r).powi(2))
        .sum()
}

/// Thin-shell statistic of an isotropic measure and of its projections to
/// random coordinate subspaces of each dimension in `ladder`.
pub fn thin_shell_stat(
    pm: &PointMeasure,
    ladder: &[usize],
    exact: bool,
    tol: Option<f64>,
    seed: u64,
) -> Result<ThinShell> {
    let n = pm.dim;
    check_isotropic(pm, isotropy_tolerance(pm, exact))?;
    if let Some(&k) = ladder.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidSpec(format!("subspace dimension {k} outside 1..={n}")));
    }
    let p = pm.probabilities()?;
    let all: Vec<usize> = (0..n).collect();
    let s_sq = shell_deviation(pm, &p, &all);
    let ci = if exact {
        0.0
    } else {
        let rn = (n as f64).sqrt();
        let vals: Vec<f64> =
            pm.points.chunks_exact(n).map(|x| (x.iter().map(|v| v * v).sum::<f64>().sqrt() - rn).powi(2)).collect();
        jackknife_mean_ci(&vals, &p)
    };
    if let Some(t) = tol {
        if ci > t {
            return Err(Error::SampleBudgetTooSmall { ci, tol: t });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ladder = ladder
        .iter()
        .map(|&k| {
            let draws: Vec<f64> = (0..SUBSPACE_DRAWS)
                .map(|_| {
                    let mut c = sample_indices(&mut rng, n, k).into_vec();
                    c.sort_unstable();
                    shell_deviation(pm, &p, &c)
                })
                .collect();
            (k, median(&draws))
        })
        .collect();
    Ok(ThinShell { s_sq, s: s_sq.sqrt(), ci, ladder })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QStat {
    /// Over quadratic-plus-linear functions.
    pub q: f64,
    /// Over pure quadratic forms.
    pub q_quadratic: f64,
    /// Optimizer `⟨Bx,x⟩ + ⟨v,x⟩` of the full problem.
    pub b: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

/// Largest generalized eigenvalue of `(s, m)` and its eigenvector.
fn gen_eig_max(s: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let e = sym_eigen(m);
    if e.min() <= 1e-10 * e.max().abs() {
        return Err(Error::RankDeficiency);
    }
    let chol = m.clone().cholesky().ok_or(Error::RankDeficiency)?;
    let l = chol.l();
    let li = l.clone().try_inverse().ok_or(Error::RankDeficiency)?;
    let red = symmetrize(&(&li * s * li.transpose()));
    let re = sym_eigen(&red);
    let u = re.vectors.column(0).into_owned();
    Ok((re.values[0], li.transpose() * u))
}

/// Quadratic Poincaré statistic of an isotropic measure.
pub fn q_stat(pm: &PointMeasure) -> Result<QStat> {
    let n = pm.dim;
    let raw = pm.moments()?;
    if check_floor(&raw.cov).is_err() {
        return Err(Error::RankDeficiency);
    }
    let quad = pairs(n);
    let nq = quad.len();
    let m = nq + n;
    let p = pm.probabilities()?;
    let mut mean = DVector::<f64>::zeros(m);
    let mut second = DMatrix::<f64>::zeros(m, m);
    let mut phi = vec![0.0; m];
    for (x, w) in pm.points.chunks_exact(n).zip(&p) {
        for (a, &(i, j)) in quad.iter().enumerate() {
            phi[a] = x[i] * x[j];
        }
        phi[nq..].copy_from_slice(x);
        for a in 0..m {
            let wa = w * phi[a];
            mean[a] += wa;
            for b in a..m {
                second[(a, b)] += wa * phi[b];
            }
        }
    }
    let mut s = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = second[(a, b)] - mean[a] * mean[b];
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    // Gradient Gram matrix from first and second moments.
    let mu = &raw.mean;
    let sec = &raw.cov + mu * mu.transpose();
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut g = DMatrix::zeros(m, m);
    for (a, &(i, j)) in quad.iter().enumerate() {
        for (b, &(k, l)) in quad.iter().enumerate() {
            g[(a, b)] = sec[(j, l)] * d(i, k) + sec[(j, k)] * d(i, l) + sec[(i, l)] * d(j, k) + sec[(i, k)] * d(j, l);
        }
        for k in 0..n {
            let v = mu[j] * d(i, k) + mu[i] * d(j, k);
            g[(a, nq + k)] = v;
            g[(nq + k, a)] = v;
        }
    }
    for k in 0..n {
        g[(nq + k, nq + k)] = 1.0;
    }
    let (full, c) = gen_eig_max(&s, &g)?;
    let sq = s.view((0, 0), (nq, nq)).into_owned();
    let gq = g.view((0, 0), (nq, nq)).into_owned();
    let (quad_only, _) = gen_eig_max(&sq, &gq)?;
    let mut b = vec![vec![0.0; n]; n];
    for (a, &(i, j)) in quad.iter().enumerate() {
        if i == j {
            b[i][i] = c[a];
        } else {
            b[i][j] = c[a] / 2.0;
            b[j][i] = c[a] / 2.0;
        }
    }
    Ok(QStat {
        q: full.max(0.0).sqrt(),
        q_quadratic: quad_only.max(0.0).sqrt(),
        b,
        v: c.rows(nq, n).iter().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaQBound {
    pub kappa: f64,
    pub q_quadratic: f64,
    pub bound: f64,
    /// `κ / (√2 q)`.
    pub ratio: f64,
    pub pass: bool,
}

/// `κ ≤ √2·q` over quadratic forms.
pub fn kappa_q_check(kappa: f64, q: &QStat, tol: f64) -> KappaQBound {
    let bound = std::f64::consts::SQRT_2 * q.q_quadratic;
    KappaQBound {
        kappa,
        q_quadratic: q.q_quadratic,
        bound,
        ratio: if bound > 0.0 { kappa / bound } else { f64::INFINITY },
        pass: kappa <= bound * (1.0 + tol),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShellKappa {
    pub kappa: f64,
    /// `√(Σ_k s_k²/k)` over the ladder.
    pub shell_side: f64,
    pub ratio: f64,
    /// `(k, Var|PX|², k·Var Y)` with `Y = |PX| − √k` on the first
    /// `k` coordinates.
    pub chain: Vec<(usize, f64, f64)>,
}

pub fn shell_kappa_diagnostic(pm: &PointMeasure, kappa: f64, shell: &ThinShell) -> Result<ShellKappa> {
    let n = pm.dim;
    let p = pm.probabilities()?;
    let shell_side = shell.ladder.iter().map(|(k, s)| s / *k as f64).sum::<f64>().sqrt();
    let chain = shell
        .ladder
        .iter()
        .map(|&(k, _)| {
            let rk = (k as f64).sqrt();
            let (mut m2, mut m4, mut my, mut my2) = (0.0, 0.0, 0.0, 0.0);
            for (x, w) in pm.points.chunks_exact(n).zip(&p) {
                let r2: f64 = x[..k].iter().map(|v| v * v).sum();
                let y = r2.sqrt() - rk;
                m2 += w * r2;
                m4 += w * r2 * r2;
                my += w * y;
                my2 += w * y * y;
            }
            (k, m4 - m2 * m2, k as f64 * (my2 - my * my))
        })
        .collect();
    Ok(ShellKappa { kappa, shell_side, ratio: if shell_side > 0.0 { kappa / shell_side } else { f64::INFINITY }, chain })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantsReport {
    pub dim: usize,
    pub estimator: Estimator,
    pub sigma_stat: ThinShell,
    pub k_stat: KStat,
    pub q_stat: QStat,
    pub kappa_q: KappaQBound,
    pub shell_kappa: ShellKappa,
}

/// All statistics of an isotropic density.
pub fn constants_report(f: &LogDensity, est: Estimator, ladder: &[usize], tol: f64, seed: u64) -> Result<ConstantsReport> {
    if let Ok(m) = exact_moments(f) {
        let n = f.dim;
        let d = op_norm_sym(&(m.covariance - DMatrix::identity(n, n))).max(m.barycenter.amax());
        if d > 1e-6 {
            return Err(Error::AnisotropicInput(d));
        }
    }
    let pm = represent(f, est)?;
    let exact = est.is_exact();
    let iso = isotropy_tolerance(&pm, exact);
    let shell = thin_shell_stat(&pm, ladder, exact, None, seed)?;
    let k = k_stat(&pm, iso)?;
    let q = q_stat(&pm)?;
    let kappa_q = kappa_q_check(k.kappa, &q, tol);
    let shell_kappa = shell_kappa_diagnostic(&pm, k.kappa, &shell)?;
    Ok(ConstantsReport { dim: f.dim, estimator: est, sigma_stat: shell, k_stat: k, q_stat: q, kappa_q, shell_kappa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BodySpec, Shape};
    use crate::measures::{make_isotropic, DensitySpec, Factor1d};

    fn gauss(n: usize) -> PointMeasure {
        represent(&make_isotropic(&DensitySpec::StandardGaussian, n).unwrap(), Estimator::Quadrature { order: 64 })
            .unwrap()
    }

    fn expo(n: usize) -> PointMeasure {
        let f = make_isotropic(&DensitySpec::Product1d { factors: vec![Factor1d::Exponential] }, n).unwrap();
        represent(&f, Estimator::Quadrature { order: 64 }).unwrap()
    }

    fn cube(n: usize) -> PointMeasure {
        let f = make_isotropic(&DensitySpec::UniformBody(BodySpec::new(Shape::Cube { side: 1.0 })), n).unwrap();
        represent(&f, Estimator::Quadrature { order: 32 }).unwrap()
    }

    #[test]
    fn gaussian_thin_shell() {
        let s1 = thin_shell_stat(&gauss(1), &[1], true, None, 0).unwrap();
        assert!((s1.s_sq - (2.0 - 2.0 * (2.0 / std::f64::consts::PI).sqrt())).abs() < 1e-8, "{}", s1.s_sq);
        let s2 = thin_shell_stat(&gauss(2), &[1, 2], true, None, 0).unwrap();
        assert!((s2.s_sq - (4.0 - 2.0 * std::f64::consts::PI.sqrt())).abs() < 1e-6, "{}", s2.s_sq);
        assert!((s2.ladder[1].1 - s2.s_sq).abs() < 1e-14);
    }

    #[test]
    fn point_mass_rejected() {
        let pm = PointMeasure::from_samples(2, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(thin_shell_stat(&pm, &[1], true, None, 0), Err(Error::AnisotropicInput(_))));
    }

    #[test]
    fn kappa_values() {
        assert!(k_stat(&gauss(2), 1e-6).unwrap().kappa < 1e-10);
        assert!(k_stat(&cube(3), 1e-6).unwrap().kappa < 1e-10);
        for n in 1..=3 {
            let k = k_stat(&expo(n), 1e-6).unwrap().kappa;
            assert!((k - 2.0).abs() < 0.02, "n={n}: {k}");
        }
    }

    #[test]
    fn eigen_and_grid_agree() {
        for n in [2, 3] {
            let t = ThirdMoments::of(&self_whiten(&expo(n)).unwrap()).unwrap();
            let eig = k_stat_from(&t).kappa;
            let grid = k_stat_grid(&t, 400).unwrap();
            assert!(grid <= eig + 1e-12);
            assert!((eig - grid).abs() < 1e-6 * eig.max(1.0) + 1e-4 / 400.0, "{eig} {grid}");
        }
    }

    #[test]
    fn tensor_symmetry() {
        let t = ThirdMoments::of(&expo(3)).unwrap();
        assert!(t.asymmetry() < 1e-10);
        assert!((t.get(0, 0, 0) - 2.0).abs() < 0.02);
        assert!(t.get(0, 1, 2).abs() < 1e-8);
    }

    #[test]
    fn q_values() {
        let g = q_stat(&gauss(2)).unwrap();
        assert!((g.q - 1.0).abs() < 1e-6, "{}", g.q);
        assert!((g.q_quadratic - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        // One quadratic feature: Var[X²]/E[4X²], on the truncated moments.
        let pm = expo(1);
        let e = q_stat(&pm).unwrap();
        let m2 = pm.expect(|x| x[0].powi(2)).unwrap();
        let m4 = pm.expect(|x| x[0].powi(4)).unwrap();
        assert!((e.q_quadratic.powi(2) - (m4 - m2 * m2) / (4.0 * m2)).abs() < 1e-10);
        assert!((e.q_quadratic.powi(2) - 2.0).abs() < 0.06);
        // Full problem on (x², x): the golden ratio.
        assert!((e.q - (1.0 + 5f64.sqrt()) / 2.0).abs() < 0.02, "{}", e.q);
        assert!(q_stat(&cube(2)).unwrap().q >= 1.0 - 1e-9);
    }

    #[test]
    fn q_rank_deficient_on_line() {
        let pts: Vec<f64> = (0..100).flat_map(|i| {
            let s = i as f64 / 50.0 - 1.0;
            [s, s]
        }).collect();
        let pm = PointMeasure::from_samples(2, pts);
        assert!(matches!(q_stat(&pm), Err(Error::RankDeficiency)));
    }

    #[test]
    fn kappa_q_bound_tight_on_exponential() {
        let pm = expo(2);
        let k = k_stat(&pm, 1e-6).unwrap().kappa;
        let r = kappa_q_check(k, &q_stat(&pm).unwrap(), 0.02);
        assert!(r.pass);
        assert!(r.ratio > 0.9, "{r:?}");
    }

    #[test]
    fn kappa_rotation_invariant() {
        let pm = expo(2);
        let a = 0.7f64;
        let u = DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]);
        let rot = pm.push_forward(&u, &DVector::zeros(2));
        let k1 = k_stat(&pm, 1e-6).unwrap().kappa;
        let k2 = k_stat(&rot, 1e-6).unwrap().kappa;
        assert!((k1 - k2).abs() < 1e-8);
    }

    #[test]
    fn monte_carlo_budget_guard() {
        let f = make_isotropic(&DensitySpec::StandardGaussian, 4).unwrap();
        let pm = represent(&f, Estimator::MonteCarlo { samples: 2000, seed: 1 }).unwrap();
        let r = thin_shell_stat(&pm, &[2], false, Some(1e-4), 0);
        assert!(matches!(r, Err(Error::SampleBudgetTooSmall { .. })));
    }

    #[test]
    fn report_runs() {
        let f = make_isotropic(&DensitySpec::Product1d { factors: vec![Factor1d::Exponential] }, 1).unwrap();
        let r = constants_report(&f, Estimator::Quadrature { order: 64 }, &[1], 0.02, 0).unwrap();
        assert!(r.kappa_q.pass);
        assert!((r.shell_kappa.kappa - 2.0).abs() < 0.02);
        assert!(r.shell_kappa.shell_side > 0.0);
    }
}
