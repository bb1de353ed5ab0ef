//! Set masses under localization, boundary measures and Cheeger ratios.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::Body;
use crate::measures::{exact_moments, LogDensity, MAX_GRID_DIM};
use crate::points::PointMeasure;
use crate::stats::{mean_se, normal_cdf};
use crate::tilt::{MomentStrategy, TiltState, TiltedMoments, Tilter};

/// A measurable test set.
#[derive(Clone)]
pub enum TestSet {
    Whole,
    /// `{x : ⟨normal, x⟩ < offset}`.
    Halfspace { normal: DVector<f64>, offset: f64 },
    /// Bodies, including ellipsoids.
    Body(Body),
    Custom(Arc<dyn Fn(&[f64]) -> bool + Send + Sync>),
}

impl fmt::Debug for TestSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestSet::Whole => write!(f, "Whole"),
            TestSet::Halfspace { normal, offset } => {
                write!(f, "Halfspace {{ normal: {:?}, offset: {offset} }}", normal.as_slice())
            }
            TestSet::Body(b) => write!(f, "Body({b:?})"),
            TestSet::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl TestSet {
    pub fn halfspace(normal: &[f64], offset: f64) -> Self {
        TestSet::Halfspace { normal: DVector::from_column_slice(normal), offset }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            TestSet::Whole => true,
            TestSet::Halfspace { normal, offset } => dot(normal, x) < *offset,
            TestSet::Body(b) => b.contains(x),
            TestSet::Custom(g) => g(x),
        }
    }

    /// Euclidean distance to the set; `None` for custom indicators.
    pub fn distance(&self, x: &[f64]) -> Option<f64> {
        match self {
            TestSet::Whole => Some(0.0),
            TestSet::Halfspace { normal, offset } => Some(((dot(normal, x) - offset) / normal.norm()).max(0.0)),
            TestSet::Body(b) => Some(b.distance(x)),
            TestSet::Custom(_) => None,
        }
    }

    /// The ε-extension, when it is again a test set of the same kind.
    pub fn extension(&self, eps: f64) -> Option<TestSet> {
        match self {
            TestSet::Whole => Some(TestSet::Whole),
            TestSet::Halfspace { normal, offset } => {
                Some(TestSet::Halfspace { normal: normal.clone(), offset: offset + eps * normal.norm() })
            }
            _ => None,
        }
    }

    /// Mass under `N(mean, cov)` when available in closed form.
    pub fn gaussian_mass(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
        match self {
            TestSet::Whole => Some(1.0),
            TestSet::Halfspace { normal, offset } => {
                let sd = normal.dot(&(cov * normal)).sqrt();
                Some(normal_cdf((offset - normal.dot(mean)) / sd))
            }
            _ => None,
        }
    }
}

fn dot(v: &DVector<f64>, x: &[f64]) -> f64 {
    v.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Mass of `set` under the tilted density `f_s` with moments `m`.
pub fn tilted_set_mass(tilter: &Tilter, s: &TiltState, m: &TiltedMoments, set: &TestSet) -> Result<f64> {
    if tilter.density().gaussian_params().is_some() {
        if let Some(g) = set.gaussian_mass(&m.a, &m.cov) {
            return Ok(g);
        }
    }
    match set {
        TestSet::Whole => return Ok(1.0),
        TestSet::Halfspace { normal, offset } => {
            if let Some(g) = tilter.halfspace_mass(s, m, normal, *offset)? {
                return Ok(g);
            }
        }
        _ => {}
    }
    tilter.measure(s, m)?.fraction(|x| set.contains(x))
}

/// `g(t) = ∫_E f_t` along one run, with realized quadratic variation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassProcess {
    pub t: Vec<f64>,
    pub g: Vec<f64>,
    /// Cumulative `Σ (Δg)²`.
    pub qv: Vec<f64>,
}

/// Extract the mass process of the observed set with index `set`.
pub fn mass_process(traj: &Trajectory, set: usize) -> Result<MassProcess> {
    let mut t = Vec::with_capacity(traj.records.len());
    let mut g = Vec::with_capacity(traj.records.len());
    for r in &traj.records {
        let v = *r
            .set_mass
            .get(set)
            .ok_or_else(|| Error::InvalidSpec(format!("trajectory has no observed set {set}")))?;
        t.push(r.t);
        g.push(v);
    }
    let mut qv = vec![0.0; g.len()];
    for i in 1..g.len() {
        qv[i] = qv[i - 1] + (g[i] - g[i - 1]).powi(2);
    }
    Ok(MassProcess { t, g, qv })
}

/// Offset `c` with `μ({⟨ν,x⟩ < c}) = target`, by bisection.
pub fn halfspace_offset_for_mass(mass: impl Fn(f64) -> Result<f64>, lo: f64, hi: f64, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mass(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Halfspace with normal `normal` holding half the mass of `f`.
pub fn median_halfspace(f: &Arc<LogDensity>, normal: &[f64], seed: u64) -> Result<TestSet> {
    let nu = DVector::from_column_slice(normal);
    let r = f.support_radius() * nu.norm();
    let off = halfspace_offset_for_mass(|c| set_mass(f, &TestSet::Halfspace { normal: nu.clone(), offset: c }, seed), -r, r, 0.5)?;
    Ok(TestSet::Halfspace { normal: nu, offset: off })
}

/// Samples used when no quadrature oracle applies.
pub const MC_SAMPLES: usize = 400_000;

fn untilted(f: &Arc<LogDensity>) -> Result<(Tilter, TiltState, TiltedMoments)> {
    let m = exact_moments(f)?;
    let tilter = Tilter::new(f.clone(), &MomentStrategy::grid())?;
    let moments = TiltedMoments { log_v: 0.0, a: m.barycenter, cov: m.covariance, n_eff: f64::INFINITY };
    Ok((tilter, TiltState::zero(f.dim), moments))
}

/// `μ(E)` for the density itself.
pub fn set_mass(f: &Arc<LogDensity>, set: &TestSet, seed: u64) -> Result<f64> {
    if let TestSet::Whole = set {
        return Ok(1.0);
    }
    if let Some((mean, cov)) = f.gaussian_params() {
        if let Some(g) = set.gaussian_mass(&mean, &cov) {
            return Ok(g);
        }
    }
    if let (TestSet::Halfspace { normal, offset }, true) = (set, f.dim <= MAX_GRID_DIM) {
        let (t, s, m) = untilted(f)?;
        if let Some(g) = t.halfspace_mass(&s, &m, normal, *offset)? {
            return Ok(g);
        }
    }
    monte_carlo(f, seed)?.fraction(|x| set.contains(x))
}

fn monte_carlo(f: &LogDensity, seed: u64) -> Result<PointMeasure> {
    if !f.has_sampler() {
        return Err(Error::NoSampler);
    }
    Ok(PointMeasure::from_samples(f.dim, f.sample_many(MC_SAMPLES, seed)?))
}

pub const DEFAULT_LADDER: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryMeasure {
    pub mass: f64,
    pub eps: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Two-point Richardson values on consecutive ladder pairs.
    pub richardson: Vec<f64>,
    pub value: f64,
}

/// Minkowski boundary measure `μ⁺(E)` from ε-extensions.
pub fn boundary_measure(f: &Arc<LogDensity>, set: &TestSet, ladder: &[f64], seed: u64) -> Result<BoundaryMeasure> {
    if ladder.len() < 2 || ladder.windows(2).any(|w| !(w[1] < w[0])) || ladder.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidSpec("ε-ladder must be positive and strictly decreasing with two entries".into()));
    }
    let mass = set_mass(f, set, seed)?;
    let quotients: Vec<f64> = match set.extension(0.0) {
        Some(_) => ladder
            .iter()
            .map(|&e| Ok((set_mass(f, &set.extension(e).expect("closed under extension"), seed)? - mass) / e))
            .collect::<Result<_>>()?,
        None => {
            let pm = monte_carlo(f, seed)?;
            let dist: Vec<f64> = pm
                .points
                .chunks_exact(f.dim)
                .map(|x| set.distance(x).ok_or_else(|| Error::InvalidSpec("custom sets have no distance".into())))
                .collect::<Result<_>>()?;
            let count = dist.len() as f64;
            ladder.iter().map(|&e| dist.iter().filter(|d| **d > 0.0 && **d <= e).count() as f64 / count / e).collect()
        }
    };
    let scale = quotients.iter().fold(0.0f64, |m, q| m.max(q.abs()));
    let slack = 0.05 * scale + 1e-9;
    let increasing = quotients.windows(2).all(|w| w[1] >= w[0] - slack);
    let decreasing = quotients.windows(2).all(|w| w[1] <= w[0] + slack);
    if !(increasing || decreasing) {
        return Err(Error::ExtrapolationUnstable(format!("non-monotone quotients {quotients:?}")));
    }
    let richardson: Vec<f64> = (0..ladder.len() - 1)
        .map(|i| {
            let (e0, e1) = (ladder[i], ladder[i + 1]);
            (e0 * quotients[i + 1] - e1 * quotients[i]) / (e0 - e1)
        })
        .collect();
    let value = *richardson.last().expect("at least one pair");
    Ok(BoundaryMeasure { mass, eps: ladder.to_vec(), quotients, richardson, value: value.max(0.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cheeger {
    pub mass: f64,
    pub boundary: f64,
    pub ratio: f64,
}

pub fn cheeger_ratio(f: &Arc<LogDensity>, set: &TestSet, ladder: &[f64], seed: u64) -> Result<Cheeger> {
    let mass = set_mass(f, set, seed)?;
    if mass <= 0.0 {
        return Err(Error::EmptySet);
    }
    if mass > 0.5 + 1e-9 {
        return Err(Error::MassTooLarge(mass));
    }
    let b = boundary_measure(f, set, ladder, seed)?;
    Ok(Cheeger { mass, boundary: b.value, ratio: b.value / mass })
}

/// Cheeger lower bound `(1 − 2λ)/Θ` from a concentration profile.
pub fn milman_reduction(lambda: f64, theta: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 0.5) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidSpec(format!("Θ must be positive, got {theta}")));
    }
    Ok((1.0 - 2.0 * lambda) / theta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceBound {
    pub runs: usize,
    pub g0: f64,
    pub t: Vec<f64>,
    /// Across-run mean of `(g(t) − ½)²` and its standard error.
    pub mean_sq_dev: Vec<f64>,
    pub se_sq_dev: Vec<f64>,
    /// Across-run mean of `g(t)` and its standard error.
    pub mean_g: Vec<f64>,
    pub se_g: Vec<f64>,
    /// Fraction of runs with `0.1 ≤ g(t) ≤ 0.9`.
    pub band_frequency: Vec<f64>,
    /// `(window start, mean realized QV rate)`.
    pub qv_rate: Vec<(f64, f64)>,
    pub max_qv_rate: f64,
    pub variance_pass: bool,
    pub qv_pass: bool,
    pub martingale_pass: bool,
    pub band_pass: bool,
}

impl VarianceBound {
    pub fn pass(&self) -> bool {
        self.variance_pass && self.qv_pass && self.martingale_pass && self.band_pass
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VarianceOptions {
    pub slack: f64,
    pub window: f64,
    pub min_runs: usize,
    /// Band frequency is asserted for `t ≤ band_until`.
    pub band_until: f64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions { slack: 0.05, window: 0.1, min_runs: 100, band_until: 0.05 }
    }
}

/// `E[(g(t) − ½)²] ≤ t` and `d[g]_t/dt ≤ 1` over an ensemble.
///
/// The squared deviation is allowed the initial offset `E[(g(0) − ½)²]`.
/// On quadrature this is bisection error; on particle clouds each run starts
/// from its own sample, so `g(0)` scatters around ½.
pub fn variance_bound_check(runs: &[Trajectory], set: usize, opts: VarianceOptions) -> Result<VarianceBound> {
    if runs.len() < opts.min_runs {
        return Err(Error::InsufficientRuns { got: runs.len(), need: opts.min_runs });
    }
    let procs = runs.iter().map(|r| mass_process(r, set)).collect::<Result<Vec<_>>>()?;
    let starts: Vec<f64> = procs.iter().map(|p| p.g[0]).collect();
    let g0 = starts.iter().sum::<f64>() / starts.len() as f64;
    if (g0 - 0.5).abs() > 0.01 {
        return Err(Error::MiscenteredSet(g0));
    }
    let len = procs.iter().map(|p| p.t.len()).min().unwrap_or(0);
    let times: Vec<f64> = procs[0].t[..len].to_vec();
    for p in &procs {
        if let Some((a, b)) = p.t[..len].iter().zip(&times).find(|(a, b)| (*a - *b).abs() > 1e-9) {
            return Err(Error::InconsistentTime(*a, *b));
        }
    }
    let offset = starts.iter().map(|g| (g - 0.5).powi(2)).sum::<f64>() / starts.len() as f64;
    let (mut msd, mut ssd, mut mg, mut sg, mut band) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut variance_pass, mut martingale_pass, mut band_pass) = (true, true, true);
    for k in 0..len {
        let g: Vec<f64> = procs.iter().map(|p| p.g[k]).collect();
        let d: Vec<f64> = g.iter().map(|v| (v - 0.5).powi(2)).collect();
        let (m, s) = mean_se(&d);
        let (mgk, sgk) = mean_se(&g);
        let freq = g.iter().filter(|v| (0.1..=0.9).contains(*v)).count() as f64 / g.len() as f64;
        let t = times[k];
        variance_pass &= m <= (1.0 + opts.slack) * t + offset + 1e-12;
        martingale_pass &= (mgk - g0).abs() <= 3.0 * sgk + 1e-9;
        if t <= opts.band_until {
            band_pass &= freq > 0.5;
        }
        msd.push(m);
        ssd.push(s);
        mg.push(mgk);
        sg.push(sgk);
        band.push(freq);
    }
    let mut qv_rate = Vec::new();
    let t_end = times[len - 1];
    let mut start = times[0];
    while start + opts.window <= t_end + 1e-9 {
        let i0 = nearest(&times, start);
        let i1 = nearest(&times, start + opts.window);
        let span = times[i1] - times[i0];
        if span > 0.0 {
            let rates: Vec<f64> = procs.iter().map(|p| (p.qv[i1] - p.qv[i0]) / span).collect();
            qv_rate.push((start, rates.iter().sum::<f64>() / rates.len() as f64));
        }
        start += opts.window;
    }
    let max_qv_rate = qv_rate.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(VarianceBound {
        runs: runs.len(),
        g0,
        t: times,
        mean_sq_dev: msd,
        se_sq_dev: ssd,
        mean_g: mg,
        se_g: sg,
        band_frequency: band,
        qv_pass: max_qv_rate <= 1.0 + opts.slack,
        qv_rate,
        max_qv_rate,
        variance_pass,
        martingale_pass,
        band_pass,
    })
}

fn nearest(times: &[f64], t: f64) -> usize {
    let i = times.partition_point(|s| *s < t - 1e-12);
    if i == 0 {
        0
    } else if i >= times.len() {
        times.len() - 1
    } else if (times[i] - t).abs() < (t - times[i - 1]).abs() {
        i
    } else {
        i - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtensionProbe {
    pub t: f64,
    pub radii: Vec<f64>,
    /// Mean and standard error of `∫_{E_r \ E} f_t` over conditioned runs.
    pub captured: Vec<(f64, f64)>,
    /// Mean of `1 − g(t)` over conditioned runs.
    pub complement: f64,
    pub conditioned_runs: usize,
    /// Smallest radius capturing at least 0.05 on average.
    pub smallest_radius: Option<f64>,
    pub monotone: bool,
}

/// Extension masses `∫_{E_r \ E} f_t` on runs with `0.1 ≤ g(t) ≤ 0.9`.
pub fn extension_mass_probe(
    f: &Arc<LogDensity>,
    strategy: &MomentStrategy,
    runs: &[Trajectory],
    set: &TestSet,
    radii: &[f64],
    t: f64,
) -> Result<ExtensionProbe> {
    let tilter = Tilter::new(f.clone(), strategy)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut comp = Vec::new();
    for run in runs {
        let r = run.at(t);
        let s = TiltState { t: r.t, c: r.c.clone(), b: r.b.clone() };
        let m = TiltedMoments { log_v: r.log_v, a: r.a.clone(), cov: r.cov.clone(), n_eff: r.n_eff };
        let g = tilted_set_mass(&tilter, &s, &m, set)?;
        if !(0.1..=0.9).contains(&g) {
            continue;
        }
        let row = match set.extension(0.0) {
            Some(_) => radii
                .iter()
                .map(|&e| Ok(tilted_set_mass(&tilter, &s, &m, &set.extension(e).expect("extension"))? - g))
                .collect::<Result<Vec<_>>>()?,
            None => {
                let pm = tilter.measure(&s, &m)?;
                let p = pm.probabilities()?;
                let dist: Vec<f64> = pm
                    .points
                    .chunks_exact(f.dim)
                    .map(|x| set.distance(x).ok_or_else(|| Error::InvalidSpec("custom sets have no distance".into())))
                    .collect::<Result<_>>()?;
                radii
                    .iter()
                    .map(|&e| Ok(dist.iter().zip(&p).filter(|(d, _)| **d > 0.0 && **d <= e).map(|(_, w)| w).sum()))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        rows.push(row);
        comp.push(1.0 - g);
    }
    if rows.is_empty() {
        return Err(Error::ConditioningEventEmpty);
    }
    let captured: Vec<(f64, f64)> = (0..radii.len())
        .map(|j| mean_se(&rows.iter().map(|r| r[j].max(0.0)).collect::<Vec<_>>()))
        .collect();
    let monotone = captured.windows(2).zip(radii.windows(2)).all(|(c, r)| r[1] < r[0] || c[1].0 >= c[0].0 - 1e-9);
    let smallest_radius = radii.iter().zip(&captured).filter(|(_, c)| c.0 >= 0.05).map(|(r, _)| *r).reduce(f64::min);
    Ok(ExtensionProbe {
        t,
        radii: radii.to_vec(),
        captured,
        complement: comp.iter().sum::<f64>() / comp.len() as f64,
        conditioned_runs: rows.len(),
        smallest_radius,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_ensemble, Observers, PathSpec, Schedule};
    use crate::geometry::{BodySpec, Shape};
    use crate::measures::{make_density, make_isotropic, DensitySpec, Factor1d};
    use crate::stats::normal_pdf;

    fn gauss(n: usize) -> Arc<LogDensity> {
        Arc::new(make_density(&DensitySpec::StandardGaussian, n).unwrap())
    }

    #[test]
    fn gaussian_boundary_and_cheeger() {
        let f = gauss(1);
        let e = TestSet::halfspace(&[1.0], 0.0);
        let b = boundary_measure(&f, &e, &DEFAULT_LADDER, 0).unwrap();
        assert!((b.value - normal_pdf(0.0)).abs() < 1e-4, "{b:?}");
        let c = cheeger_ratio(&f, &e, &DEFAULT_LADDER, 0).unwrap();
        assert!((c.ratio - 2.0 * normal_pdf(0.0)).abs() < 1e-4);
    }

    #[test]
    fn cube_half_cut() {
        let f = Arc::new(make_density(&DensitySpec::UniformBody(BodySpec::new(Shape::Cube { side: 1.0 })), 2).unwrap());
        let e = TestSet::halfspace(&[1.0, 0.0], 0.0);
        let b = boundary_measure(&f, &e, &DEFAULT_LADDER, 0).unwrap();
        assert!((b.value - 1.0).abs() < 1e-9, "{b:?}");
        let c = cheeger_ratio(&f, &e, &DEFAULT_LADDER, 0).unwrap();
        assert!((c.ratio - 2.0).abs() < 1e-8);
    }

    #[test]
    fn whole_space_has_no_boundary() {
        let b = boundary_measure(&gauss(2), &TestSet::Whole, &DEFAULT_LADDER, 0).unwrap();
        assert_eq!(b.value, 0.0);
        assert!(matches!(cheeger_ratio(&gauss(2), &TestSet::Whole, &DEFAULT_LADDER, 0), Err(Error::MassTooLarge(_))));
    }

    #[test]
    fn empty_set_rejected() {
        let e = TestSet::Custom(Arc::new(|_: &[f64]| false));
        assert!(matches!(cheeger_ratio(&gauss(1), &e, &DEFAULT_LADDER, 0), Err(Error::EmptySet)));
    }

    #[test]
    fn product_marginal_at_cut() {
        let f = Arc::new(make_isotropic(&DensitySpec::Product1d { factors: vec![Factor1d::Exponential] }, 2).unwrap());
        let e = TestSet::halfspace(&[1.0, 0.0], 0.0);
        let b = boundary_measure(&f, &e, &DEFAULT_LADDER, 0).unwrap();
        // Isotropic exponential marginal e^{-(x+1)} at x = 0, up to truncation.
        let exact = (-1.0f64).exp() / (1.0 - f.truncated_mass.min(1e-3));
        assert!((b.value - exact).abs() < 1e-3, "{} {exact}", b.value);
    }

    #[test]
    fn ball_boundary_by_monte_carlo() {
        // Ball of radius ½ under the 2D Gaussian: μ⁺ = r e^{-r²/2}.
        let f = gauss(2);
        let body = BodySpec::new(Shape::Ball { radius: 0.5 }).build(2).unwrap();
        let b = boundary_measure(&f, &TestSet::Body(body), &DEFAULT_LADDER, 3).unwrap();
        let exact = 0.5 * (-0.125f64).exp();
        assert!((b.value - exact).abs() < 0.05 * exact, "{} {exact}", b.value);
    }

    #[test]
    fn milman() {
        assert!((milman_reduction(0.05, 2.0).unwrap() - 0.45).abs() < 1e-15);
        assert!((milman_reduction(0.25, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(milman_reduction(0.5 - 1e-12, 1.0).unwrap() < 1e-11);
        assert!(matches!(milman_reduction(0.5, 1.0), Err(Error::LambdaOutOfRange(_))));
        assert!(matches!(milman_reduction(0.0, 1.0), Err(Error::LambdaOutOfRange(_))));
    }

    #[test]
    fn median_halfspace_of_exponential() {
        let f = Arc::new(make_isotropic(&DensitySpec::Product1d { factors: vec![Factor1d::Exponential] }, 1).unwrap());
        let e = median_halfspace(&f, &[1.0], 0).unwrap();
        assert!((set_mass(&f, &e, 0).unwrap() - 0.5).abs() < 1e-9);
        let TestSet::Halfspace { offset, .. } = e else { unreachable!() };
        // Median of Exp(1) is ln 2; truncation moves it slightly.
        assert!((offset - (2f64.ln() - 1.0)).abs() < 5e-4, "{offset}");
    }

    fn gaussian_runs(n: usize, runs: u64) -> (Vec<Trajectory>, TestSet) {
        let f = gauss(n);
        let mut normal = vec![0.0; n];
        normal[0] = 1.0;
        let e = TestSet::halfspace(&normal, 0.0);
        let obs = Observers { sets: vec![TestSet::Whole, e.clone()], ..Default::default() };
        let path = PathSpec::Tilt { strategy: MomentStrategy::ClosedFormGaussian };
        let tr = run_ensemble(&f, &path, &Schedule::new(0.01, 1.0), 5, runs, &obs).unwrap();
        (tr, e)
    }

    #[test]
    fn gaussian_mass_process_matches_conditional_law() {
        let (runs, _) = gaussian_runs(1, 3);
        for tr in &runs {
            let mp = mass_process(tr, 1).unwrap();
            let whole = mass_process(tr, 0).unwrap();
            assert!(whole.g.iter().all(|g| *g == 1.0) && *whole.qv.last().unwrap() == 0.0);
            assert_eq!(mp.g[0], 0.5);
            for (r, g) in tr.records.iter().zip(&mp.g) {
                assert!((g - normal_cdf(-r.a[0] / r.cov[(0, 0)].sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variance_bound_on_gaussian() {
        let (runs, _) = gaussian_runs(2, 120);
        let r = variance_bound_check(&runs, 1, VarianceOptions::default()).unwrap();
        assert!(r.pass(), "{r:?}");
        assert_eq!(r.mean_sq_dev[0], 0.0);
        assert!(r.max_qv_rate < 1.0);
        assert!(matches!(
            variance_bound_check(&runs[..50], 1, VarianceOptions::default()),
            Err(Error::InsufficientRuns { .. })
        ));
    }

    #[test]
    fn cloud_runs_start_from_their_own_sample() {
        let f = gauss(2);
        let obs = Observers { sets: vec![TestSet::halfspace(&[1.0, 0.0], 0.0)], ..Default::default() };
        let path = PathSpec::Cloud(crate::engine::CloudOptions::new(2000));
        let runs = run_ensemble(&f, &path, &Schedule::new(0.01, 0.3), 6, 100, &obs).unwrap();
        let starts: Vec<f64> = runs.iter().map(|r| r.records[0].set_mass[0]).collect();
        assert!(starts.iter().any(|g| *g != starts[0]));
        let r = variance_bound_check(&runs, 0, VarianceOptions::default()).unwrap();
        assert!(r.mean_sq_dev[0] > 0.0);
        assert!(r.variance_pass, "{r:?}");
    }

    #[test]
    fn miscentered_set_rejected() {
        let f = gauss(1);
        let obs = Observers { sets: vec![TestSet::halfspace(&[1.0], 0.5)], ..Default::default() };
        let path = PathSpec::Tilt { strategy: MomentStrategy::ClosedFormGaussian };
        let runs = run_ensemble(&f, &path, &Schedule::new(0.1, 0.2), 0, 100, &obs).unwrap();
        assert!(matches!(
            variance_bound_check(&runs, 0, VarianceOptions::default()),
            Err(Error::MiscenteredSet(_))
        ));
    }

    #[test]
    fn extension_probe_gaussian() {
        let (runs, e) = gaussian_runs(1, 60);
        let f = gauss(1);
        let radii = [0.0, 0.1, 0.5, 40.0];
        let p = extension_mass_probe(&f, &MomentStrategy::ClosedFormGaussian, &runs, &e, &radii, 0.3).unwrap();
        assert!(p.monotone);
        assert_eq!(p.captured[0].0, 0.0);
        assert!((p.captured[3].0 - p.complement).abs() < 1e-12);
        // Band mass Φ((r − a)/√A) − Φ(−a/√A) averaged over the same runs.
        let mut band = Vec::new();
        for tr in &runs {
            let r = tr.at(0.3);
            let s = r.cov[(0, 0)].sqrt();
            let g = normal_cdf(-r.a[0] / s);
            if (0.1..=0.9).contains(&g) {
                band.push(normal_cdf((0.5 - r.a[0]) / s) - g);
            }
        }
        let mean = band.iter().sum::<f64>() / band.len() as f64;
        assert!((p.captured[2].0 - mean).abs() < 1e-12);
    }
}
