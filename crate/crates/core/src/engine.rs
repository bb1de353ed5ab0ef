//! The localization process itself.
//!
//! Two interchangeable paths evolve the same process: the tilt path steps
//! `(c, B)` and recomputes `(V, a, A)` through a moment strategy, the cloud
//! path carries exponential log-weight updates on fixed sample points. Both
//! consume the same counter-based noise, so runs with equal seeds are coupled.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::k_stat_of;
use crate::error::{Error, Result};
use crate::isoperimetry::{tilted_set_mass, TestSet};
use crate::linalg::{check_floor, op_norm_sym, ridge, roots, sym_eigen, sym_inv_sqrt, symmetrize, Roots};
use crate::measures::{tilt_exponent, LogDensity};
use crate::noise::{Noise, MAX_DEPTH};
use crate::points::{n_eff, weighted_mean_cov, PointMeasure};
use crate::tilt::{MomentStrategy, TiltState, TiltedMoments, Tilter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub dt: f64,
    pub t_max: f64,
    /// Record every `stride` steps.
    #[serde(default = "one")]
    pub stride: usize,
    /// Each noise step is split into `2^refine` integration steps.
    #[serde(default)]
    pub refine: u32,
    /// Split a step when `|A^{-1/2} dW|` exceeds this.
    #[serde(default = "default_guard")]
    pub guard: f64,
    #[serde(default = "default_depth")]
    pub max_depth: u32,
    /// Stop once `Tr A < stop_trace · n`.
    #[serde(default = "default_stop")]
    pub stop_trace: f64,
    /// Add `ε·Id` instead of failing when `A` breaches the covariance floor.
    #[serde(default)]
    pub allow_ridge: bool,
}

fn one() -> usize {
    1
}
fn default_guard() -> f64 {
    5.0
}
fn default_depth() -> u32 {
    12
}
fn default_stop() -> f64 {
    1e-4
}

impl Schedule {
    pub fn new(dt: f64, t_max: f64) -> Self {
        Schedule {
            dt,
            t_max,
            stride: 1,
            refine: 0,
            guard: default_guard(),
            max_depth: default_depth(),
            stop_trace: default_stop(),
            allow_ridge: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidSpec(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_max >= self.dt) {
            return Err(Error::InvalidSpec(format!("t_max {} must be at least dt {}", self.t_max, self.dt)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidSpec("stride must be positive".into()));
        }
        if self.refine + self.max_depth > MAX_DEPTH {
            return Err(Error::InvalidSpec(format!("refine + max_depth must not exceed {MAX_DEPTH}")));
        }
        Ok(())
    }

    /// Width of one noise step.
    pub fn noise_step(&self) -> f64 {
        self.dt * f64::from(1u32 << self.refine)
    }

    pub fn noise_steps(&self) -> usize {
        (self.t_max / self.noise_step() - 1e-9).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudOptions {
    pub particles: usize,
    /// Map the initial sample to exact empirical isotropy.
    #[serde(default = "yes")]
    pub whiten: bool,
    #[serde(default = "default_min_neff")]
    pub min_neff: f64,
    #[serde(default)]
    pub abort_on_degenerate: bool,
    /// Multinomial resampling when `N_eff < N/2`. Breaks the exact
    /// martingale structure of the weights.
    #[serde(default)]
    pub resample: bool,
}

fn yes() -> bool {
    true
}
fn default_min_neff() -> f64 {
    10.0
}

impl CloudOptions {
    pub fn new(particles: usize) -> Self {
        CloudOptions { particles, whiten: true, min_neff: default_min_neff(), abort_on_degenerate: false, resample: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "kebab-case")]
pub enum PathSpec {
    Tilt { strategy: MomentStrategy },
    Cloud(CloudOptions),
}

/// What to measure at each record besides the moments.
#[derive(Debug, Clone, Default)]
pub struct Observers {
    /// Points `x₀` at which `F_t(x₀) = f_t(x₀)/f(x₀)` is recorded.
    pub probes: Vec<DVector<f64>>,
    pub sets: Vec<TestSet>,
    pub kappa: bool,
    /// Mass of `f_t` on an independent reference rule (tilt path).
    pub mass_check: bool,
    /// Keep the final weighted measure.
    pub snapshot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub c: DVector<f64>,
    pub b: DMatrix<f64>,
    pub a: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_v: f64,
    pub eigvals: DVector<f64>,
    pub n_eff: f64,
    /// `∫₀ᵗ A_s ds`.
    pub int_a: DMatrix<f64>,
    pub probes: Vec<f64>,
    pub set_mass: Vec<f64>,
    pub kappa: Option<f64>,
    pub mass: Option<f64>,
    pub ridge: f64,
}

impl StepRecord {
    pub fn v(&self) -> f64 {
        self.log_v.exp()
    }

    pub fn atilde(&self) -> DMatrix<f64> {
        &self.cov + &self.int_a
    }

    pub fn trace_atilde(&self) -> f64 {
        self.cov.trace() + self.int_a.trace()
    }

    pub fn op_norm(&self) -> f64 {
        self.eigvals[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    TimeLimit,
    TraceTolerance,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub run: u64,
    pub seed: u64,
    pub dim: usize,
    pub schedule: Schedule,
    pub records: Vec<StepRecord>,
    pub stop: StopReason,
    pub guard_splits: usize,
    pub warnings: Vec<String>,
    pub snapshot: Option<PointMeasure>,
}

impl Trajectory {
    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("trajectory has records")
    }

    /// Record whose time is closest to `t`.
    pub fn at(&self, t: f64) -> &StepRecord {
        self.records
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .expect("trajectory has records")
    }
}

/// Moments at the current time plus matrix roots of `A`.
pub struct Current {
    pub m: TiltedMoments,
    pub roots: Roots,
    pub ridge: f64,
}

impl Current {
    fn new(m: TiltedMoments, allow_ridge: bool) -> Result<Self> {
        let mut m = m;
        let mut eps = 0.0;
        if let Err(e) = check_floor(&m.cov) {
            if !allow_ridge {
                return Err(e);
            }
            let (r, e2) = ridge(&m.cov);
            m.cov = r;
            eps = e2;
        }
        let roots = roots(&m.cov);
        Ok(Current { m, roots, ridge: eps })
    }
}

/// One realization of the localization dynamics.
pub trait Path {
    fn dim(&self) -> usize;
    fn state(&self) -> &TiltState;
    fn moments(&mut self, allow_ridge: bool) -> Result<Current>;
    fn advance(&mut self, cur: &Current, dw: &DVector<f64>, h: f64) -> Result<()>;
    /// Normalized measure representing `f_t`.
    fn measure(&self, cur: &Current) -> Result<PointMeasure>;
    /// `F_t(x)` at each probe point.
    fn probes(&self, cur: &Current, xs: &[DVector<f64>]) -> Vec<f64>;
    fn set_mass(&self, cur: &Current, set: &TestSet) -> Result<f64>;
    fn reference_mass(&self, _cur: &Current) -> Result<Option<f64>> {
        Ok(None)
    }
}

fn advance_tilt(s: &mut TiltState, cur: &Current, dw: &DVector<f64>, h: f64) {
    let r = &cur.roots;
    s.c += &r.inv_sqrt * dw + &r.inv * &cur.m.a * h;
    s.b = symmetrize(&(&s.b + &r.inv * h));
    s.t += h;
}

/// Tilt-SDE path.
pub struct TiltPath {
    tilter: Tilter,
    state: TiltState,
    last: Option<TiltedMoments>,
}

impl TiltPath {
    pub fn new(f: Arc<LogDensity>, strategy: &MomentStrategy) -> Result<Self> {
        let n = f.dim;
        Ok(TiltPath { tilter: Tilter::new(f, strategy)?, state: TiltState::zero(n), last: None })
    }

    pub fn from_state(f: Arc<LogDensity>, strategy: &MomentStrategy, state: TiltState) -> Result<Self> {
        Ok(TiltPath { tilter: Tilter::new(f, strategy)?, state, last: None })
    }
}

impl Path for TiltPath {
    fn dim(&self) -> usize {
        self.state.c.len()
    }

    fn state(&self) -> &TiltState {
        &self.state
    }

    fn moments(&mut self, allow_ridge: bool) -> Result<Current> {
        let m = self.tilter.moments_raw(&self.state, self.last.as_ref())?;
        self.last = Some(m.clone());
        Current::new(m, allow_ridge)
    }

    fn advance(&mut self, cur: &Current, dw: &DVector<f64>, h: f64) -> Result<()> {
        advance_tilt(&mut self.state, cur, dw, h);
        Ok(())
    }

    fn measure(&self, cur: &Current) -> Result<PointMeasure> {
        self.tilter.measure(&self.state, &cur.m)
    }

    fn probes(&self, cur: &Current, xs: &[DVector<f64>]) -> Vec<f64> {
        xs.iter().map(|x| (self.state.exponent(x.as_slice()) - cur.m.log_v).exp()).collect()
    }

    fn set_mass(&self, cur: &Current, set: &TestSet) -> Result<f64> {
        tilted_set_mass(&self.tilter, &self.state, &cur.m, set)
    }

    fn reference_mass(&self, cur: &Current) -> Result<Option<f64>> {
        self.tilter.reference_mass(&self.state, &cur.m).map(Some)
    }
}

/// Weighted particle cloud path.
pub struct CloudPath {
    dim: usize,
    points: Vec<f64>,
    log_w: Vec<f64>,
    state: TiltState,
    opts: CloudOptions,
    rng: ChaCha8Rng,
    pub warnings: Vec<String>,
    pub resampled: bool,
}

/// Map a sample to exact empirical isotropy.
pub fn whiten_points(dim: usize, points: &mut [f64]) -> Result<()> {
    let count = points.len() / dim;
    let p = vec![1.0 / count as f64; count];
    let (mean, cov) = weighted_mean_cov(dim, points, &p);
    check_floor(&cov).map_err(|_| Error::DegenerateCloud { n_eff: count as f64, min: dim as f64 + 1.0 })?;
    let m = sym_inv_sqrt(&cov);
    let mut y = vec![0.0; dim];
    for x in points.chunks_exact_mut(dim) {
        for i in 0..dim {
            y[i] = (0..dim).map(|j| m[(i, j)] * (x[j] - mean[j])).sum();
        }
        x.copy_from_slice(&y);
    }
    Ok(())
}

impl CloudPath {
    /// Sample the cloud from `f` with a stream derived from `(seed, run)`.
    pub fn sample(f: &LogDensity, opts: &CloudOptions, seed: u64, run: u64) -> Result<Self> {
        if opts.particles < 2 {
            return Err(Error::InvalidSpec("a cloud needs at least two particles".into()));
        }
        let mut rng = cloud_rng(seed, run);
        let mut pts = Vec::with_capacity(opts.particles * f.dim);
        for _ in 0..opts.particles {
            pts.extend(f.sample(&mut rng)?);
        }
        Self::from_points(f.dim, pts, opts, rng)
    }

    pub fn from_points(dim: usize, mut points: Vec<f64>, opts: &CloudOptions, rng: ChaCha8Rng) -> Result<Self> {
        if opts.whiten {
            whiten_points(dim, &mut points)?;
        }
        let count = points.len() / dim;
        Ok(CloudPath {
            dim,
            points,
            log_w: vec![0.0; count],
            state: TiltState::zero(dim),
            opts: opts.clone(),
            rng,
            warnings: Vec::new(),
            resampled: false,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    fn resample(&mut self, p: &[f64]) {
        use rand::Rng;
        let count = p.len();
        let mut cum = Vec::with_capacity(count);
        let mut s = 0.0;
        for w in p {
            s += w;
            cum.push(s);
        }
        let mut out = Vec::with_capacity(self.points.len());
        for _ in 0..count {
            let u: f64 = self.rng.random::<f64>() * s;
            let i = cum.partition_point(|c| *c < u).min(count - 1);
            out.extend_from_slice(&self.points[i * self.dim..(i + 1) * self.dim]);
        }
        let max = self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_mean = max + (self.log_w.iter().map(|l| (l - max).exp()).sum::<f64>() / count as f64).ln();
        self.points = out;
        self.log_w = vec![log_mean; count];
        self.resampled = true;
    }
}

fn cloud_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    rng.set_stream(run);
    rng
}

/// `log w += ⟨y, u⟩ − ½h⟨A⁻¹y, y⟩` with `y = x − a`; `inv` is column-major.
fn reweight<const D: usize>(points: &[f64], log_w: &mut [f64], a: &[f64], u: &[f64], inv: &[f64], h: f64) {
    let (a, u, inv) = (&a[..D], &u[..D], &inv[..D * D]);
    let mut y = [0.0; D];
    for (x, lw) in points.chunks_exact(D).zip(log_w.iter_mut()) {
        let mut lin = 0.0;
        for i in 0..D {
            y[i] = x[i] - a[i];
            lin += y[i] * u[i];
        }
        let mut quad = 0.0;
        for i in 0..D {
            let mut row = 0.0;
            for j in 0..D {
                row += inv[j * D + i] * y[j];
            }
            quad += y[i] * row;
        }
        *lw += lin - 0.5 * quad * h;
    }
}

fn reweight_dyn(d: usize, points: &[f64], log_w: &mut [f64], a: &[f64], u: &[f64], inv: &[f64], h: f64) {
    let mut y = vec![0.0; d];
    for (x, lw) in points.chunks_exact(d).zip(log_w.iter_mut()) {
        let mut lin = 0.0;
        for i in 0..d {
            y[i] = x[i] - a[i];
            lin += y[i] * u[i];
        }
        let mut quad = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += inv[j * d + i] * y[j];
            }
            quad += y[i] * row;
        }
        *lw += lin - 0.5 * quad * h;
    }
}

impl Path for CloudPath {
    fn dim(&self) -> usize {
        self.dim
    }

    fn state(&self) -> &TiltState {
        &self.state
    }

    fn moments(&mut self, allow_ridge: bool) -> Result<Current> {
        let max = self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (p, log_total) = PointMeasure::normalize(&self.log_w, max)?;
        let ne = n_eff(&p);
        if ne < self.opts.min_neff {
            let err = Error::DegenerateCloud { n_eff: ne, min: self.opts.min_neff };
            if self.opts.abort_on_degenerate {
                return Err(err);
            }
            if self.warnings.len() < 16 {
                self.warnings.push(format!("t={:.4}: {err}", self.state.t));
            }
        }
        let (a, cov) = weighted_mean_cov(self.dim, &self.points, &p);
        let log_v = log_total - (p.len() as f64).ln();
        if self.opts.resample && ne < 0.5 * p.len() as f64 {
            self.resample(&p);
        }
        Current::new(TiltedMoments { log_v, a, cov, n_eff: ne }, allow_ridge)
    }

    fn advance(&mut self, cur: &Current, dw: &DVector<f64>, h: f64) -> Result<()> {
        let u = &cur.roots.inv_sqrt * dw;
        let (a, u, inv) = (cur.m.a.as_slice(), u.as_slice(), cur.roots.inv.as_slice());
        match self.dim {
            1 => reweight::<1>(&self.points, &mut self.log_w, a, u, inv, h),
            2 => reweight::<2>(&self.points, &mut self.log_w, a, u, inv, h),
            3 => reweight::<3>(&self.points, &mut self.log_w, a, u, inv, h),
            d => reweight_dyn(d, &self.points, &mut self.log_w, a, u, inv, h),
        }
        advance_tilt(&mut self.state, cur, dw, h);
        Ok(())
    }

    fn measure(&self, _cur: &Current) -> Result<PointMeasure> {
        let max = self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (p, _) = PointMeasure::normalize(&self.log_w, max)?;
        Ok(PointMeasure { dim: self.dim, points: self.points.clone(), log_w: p.iter().map(|v| v.ln()).collect() })
    }

    fn probes(&self, _cur: &Current, xs: &[DVector<f64>]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let s = &self.state;
        let ex: Vec<f64> = self.points.chunks_exact(self.dim).map(|p| tilt_exponent(&s.c, &s.b, p)).collect();
        let max = ex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = ex.iter().map(|e| (e - max).exp()).sum::<f64>() / ex.len() as f64;
        xs.iter().map(|x| (tilt_exponent(&s.c, &s.b, x.as_slice()) - max - mean.ln()).exp()).collect()
    }

    fn set_mass(&self, cur: &Current, set: &TestSet) -> Result<f64> {
        self.measure(cur)?.fraction(|x| set.contains(x))
    }
}

struct Driver<'a> {
    path: &'a mut dyn Path,
    schedule: &'a Schedule,
    noise: &'a Noise,
    run: u64,
    obs: &'a Observers,
    int_a: DMatrix<f64>,
    records: Vec<StepRecord>,
    guard_splits: usize,
}

impl Driver<'_> {
    fn record(&mut self, cur: &Current) -> Result<()> {
        let s = self.path.state();
        let probes = self.path.probes(cur, &self.obs.probes);
        let set_mass = self.obs.sets.iter().map(|e| self.path.set_mass(cur, e)).collect::<Result<Vec<_>>>()?;
        let kappa = if self.obs.kappa {
            let m = self.path.measure(cur)?;
            Some(k_stat_of(&m, &cur.m.a, &cur.m.cov)?.kappa)
        } else {
            None
        };
        let mass = if self.obs.mass_check { self.path.reference_mass(cur)? } else { None };
        self.records.push(StepRecord {
            t: s.t,
            c: s.c.clone(),
            b: s.b.clone(),
            a: cur.m.a.clone(),
            cov: cur.m.cov.clone(),
            log_v: cur.m.log_v,
            eigvals: cur.roots.eigen.values.clone(),
            n_eff: cur.m.n_eff,
            int_a: self.int_a.clone(),
            probes,
            set_mass,
            kappa,
            mass,
            ridge: cur.ridge,
        });
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn step(&mut self, cur: Current, inc: DVector<f64>, h: f64, step: usize, node: u64, depth: u32) -> Result<Current> {
        let kick = (&cur.roots.inv_sqrt * &inc).norm();
        if kick > self.schedule.guard && depth < self.schedule.refine + self.schedule.max_depth {
            self.guard_splits += 1;
            let (l, r) = self.noise.split(self.run, step, node, &inc, h);
            let mid = self.step(cur, l, h / 2.0, step, 2 * node, depth + 1)?;
            return self.step(mid, r, h / 2.0, step, 2 * node + 1, depth + 1);
        }
        self.path.advance(&cur, &inc, h)?;
        let next = self.path.moments(self.schedule.allow_ridge)?;
        self.int_a += &next.m.cov * h;
        Ok(next)
    }
}

/// Drive a path through a schedule.
pub fn run_path(path: &mut dyn Path, schedule: &Schedule, noise: &Noise, run: u64, obs: &Observers) -> Result<Trajectory> {
    schedule.validate()?;
    let n = path.dim();
    if noise.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: noise.dim() });
    }
    let mut d = Driver {
        path,
        schedule,
        noise,
        run,
        obs,
        int_a: DMatrix::zeros(n, n),
        records: Vec::new(),
        guard_splits: 0,
    };
    let mut cur = d.path.moments(schedule.allow_ridge)?;
    d.record(&cur)?;
    let base_h = schedule.noise_step();
    let mut fine = 0usize;
    let mut stop = StopReason::TimeLimit;
    let mut last_recorded = 0usize;
    'outer: for k in 0..schedule.noise_steps() {
        for (node, inc) in noise.refined(run, k, base_h, schedule.refine) {
            cur = d.step(cur, inc, schedule.dt, k, node, schedule.refine)?;
            fine += 1;
            let t = d.path.state().t;
            let done_time = t >= schedule.t_max - 1e-9 * schedule.dt;
            let done_trace = cur.m.cov.trace() < schedule.stop_trace * n as f64;
            if fine % schedule.stride == 0 || done_time || done_trace {
                d.record(&cur)?;
                last_recorded = fine;
            }
            if done_trace {
                stop = StopReason::TraceTolerance;
                break 'outer;
            }
            if done_time {
                break 'outer;
            }
        }
    }
    if last_recorded != fine {
        d.record(&cur)?;
    }
    let snapshot = if obs.snapshot { Some(d.path.measure(&cur)?) } else { None };
    Ok(Trajectory {
        run,
        seed: 0,
        dim: n,
        schedule: schedule.clone(),
        records: d.records,
        stop,
        guard_splits: d.guard_splits,
        warnings: Vec::new(),
        snapshot,
    })
}

/// One run of the requested path on `f`.
pub fn run_trajectory(
    f: &Arc<LogDensity>,
    path: &PathSpec,
    schedule: &Schedule,
    seed: u64,
    run: u64,
    obs: &Observers,
) -> Result<Trajectory> {
    check_isotropic(f)?;
    let noise = Noise::new(seed, f.dim);
    run_with_noise(f, path, schedule, &noise, seed, run, obs)
}

pub fn run_with_noise(
    f: &Arc<LogDensity>,
    path: &PathSpec,
    schedule: &Schedule,
    noise: &Noise,
    seed: u64,
    run: u64,
    obs: &Observers,
) -> Result<Trajectory> {
    let (mut traj, warnings) = match path {
        PathSpec::Tilt { strategy } => {
            let mut p = TiltPath::new(f.clone(), strategy)?;
            (run_path(&mut p, schedule, noise, run, obs)?, Vec::new())
        }
        PathSpec::Cloud(opts) => {
            let mut p = CloudPath::sample(f, opts, seed, run)?;
            let t = run_path(&mut p, schedule, noise, run, obs)?;
            (t, std::mem::take(&mut p.warnings))
        }
    };
    traj.seed = seed;
    traj.warnings = warnings;
    if traj.guard_splits > 0 {
        traj.warnings.push(format!("step guard split {} steps", traj.guard_splits));
    }
    Ok(traj)
}

/// Independent replicate runs `0..runs`, in run order.
pub fn run_ensemble(
    f: &Arc<LogDensity>,
    path: &PathSpec,
    schedule: &Schedule,
    seed: u64,
    runs: u64,
    obs: &Observers,
) -> Result<Vec<Trajectory>> {
    check_isotropic(f)?;
    let noise = Noise::new(seed, f.dim);
    (0..runs).into_par_iter().map(|r| run_with_noise(f, path, schedule, &noise, seed, r, obs)).collect()
}

/// Reject densities whose exact moments are far from isotropic.
pub fn check_isotropic(f: &LogDensity) -> Result<()> {
    let m = match crate::measures::exact_moments(f) {
        Ok(m) => m,
        Err(Error::QuadratureDimensionTooHigh { .. }) => return Ok(()),
        Err(e) => return Err(e),
    };
    let n = f.dim;
    let dev = op_norm_sym(&(m.covariance - DMatrix::identity(n, n))).max(m.barycenter.amax());
    if dev > 1e-6 {
        return Err(Error::AnisotropicInput(dev));
    }
    Ok(())
}

/// Largest discrepancies between tilt-path and cloud-path moments driven by
/// the same noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCheck {
    pub max_a: f64,
    pub max_cov: f64,
    pub records: usize,
}

pub fn compare_trajectories(x: &Trajectory, y: &Trajectory) -> CrossCheck {
    let mut max_a: f64 = 0.0;
    let mut max_cov: f64 = 0.0;
    let mut count = 0;
    for (r, s) in x.records.iter().zip(&y.records) {
        if (r.t - s.t).abs() > 1e-9 {
            break;
        }
        max_a = max_a.max((&r.a - &s.a).norm());
        max_cov = max_cov.max(op_norm_sym(&(&r.cov - &s.cov)));
        count += 1;
    }
    CrossCheck { max_a, max_cov, records: count }
}

pub fn cross_check_paths(
    f: &Arc<LogDensity>,
    schedule: &Schedule,
    cloud: &CloudOptions,
    seed: u64,
    run: u64,
) -> Result<CrossCheck> {
    let strategy = crate::tilt::default_strategy(f);
    let obs = Observers::default();
    let tilt = run_trajectory(f, &PathSpec::Tilt { strategy }, schedule, seed, run, &obs)?;
    let cl = run_trajectory(f, &PathSpec::Cloud(cloud.clone()), schedule, seed, run, &obs)?;
    Ok(compare_trajectories(&tilt, &cl))
}

/// Eigenvalues of `A` in decreasing order.
pub fn eigvals(m: &DMatrix<f64>) -> DVector<f64> {
    sym_eigen(m).values
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BodySpec, Shape};
    use crate::measures::{make_density, make_isotropic, DensitySpec};

    fn gauss(n: usize) -> Arc<LogDensity> {
        Arc::new(make_density(&DensitySpec::StandardGaussian, n).unwrap())
    }

    fn closed() -> PathSpec {
        PathSpec::Tilt { strategy: MomentStrategy::ClosedFormGaussian }
    }

    #[test]
    fn zero_noise_step_from_origin() {
        let f = gauss(2);
        let mut p = TiltPath::new(f, &MomentStrategy::ClosedFormGaussian).unwrap();
        let cur = p.moments(false).unwrap();
        p.advance(&cur, &DVector::zeros(2), 0.01).unwrap();
        assert!(p.state().c.amax() < 1e-15);
        assert!((p.state().b.clone() - DMatrix::identity(2, 2) * 0.01).amax() < 1e-15);
        let before = p.state().clone();
        let cur = p.moments(false).unwrap();
        p.advance(&cur, &DVector::zeros(2), 0.0).unwrap();
        assert_eq!(&before, p.state());
    }

    #[test]
    fn gaussian_b_tracks_exponential() {
        let f = gauss(3);
        let tr = run_trajectory(&f, &closed(), &Schedule::new(1e-3, 1.0).with_stride(100), 3, 0, &Observers::default())
            .unwrap();
        let last = tr.last();
        assert!((last.t - 1.0).abs() < 1e-9);
        let expect = 1f64.exp() - 1.0;
        for i in 0..3 {
            assert!((last.b[(i, i)] - expect).abs() < 0.05 * expect);
        }
        // Euler on (I + B) with exact A is (1 + dt)^k.
        assert!((last.b[(0, 0)] - (1.001f64.powi(1000) - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn gaussian_atilde_is_identity() {
        let f = gauss(2);
        let tr = run_trajectory(&f, &closed(), &Schedule::new(1e-3, 2.0).with_stride(50), 1, 4, &Observers::default())
            .unwrap();
        for r in &tr.records {
            assert!((r.atilde() - DMatrix::identity(2, 2)).amax() < 1e-10, "t={}", r.t);
            assert!((r.eigvals[0] - (1.001f64).powf(-r.t / 1e-3)).abs() < 1e-9);
        }
    }

    #[test]
    fn cloud_and_tilt_record_same_times() {
        let f = gauss(1);
        let sched = Schedule::new(1e-2, 0.5).with_stride(5);
        let cc = cross_check_paths(&f, &sched, &CloudOptions::new(20_000), 9, 0).unwrap();
        assert_eq!(cc.records, 11);
        assert!(cc.max_a < 0.05, "{cc:?}");
    }

    #[test]
    fn weight_update_is_exact_tilt() {
        // The cloud's log-weights differ from ⟨c,x⟩ − ½⟨Bx,x⟩ by a constant.
        let f = gauss(2);
        let mut p = CloudPath::sample(&f, &CloudOptions::new(500), 1, 0).unwrap();
        let noise = Noise::new(5, 2);
        for k in 0..50 {
            let cur = p.moments(false).unwrap();
            p.advance(&cur, &noise.increment(0, k, 0.01), 0.01).unwrap();
        }
        let s = p.state().clone();
        let diffs: Vec<f64> = p
            .points()
            .chunks_exact(2)
            .zip(p.log_weights())
            .map(|(x, lw)| lw - tilt_exponent(&s.c, &s.b, x))
            .collect();
        let spread = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - diffs.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-10, "{spread}");
    }

    #[test]
    fn whitened_cloud_starts_isotropic() {
        let f = Arc::new(
            make_isotropic(&DensitySpec::UniformBody(BodySpec::new(Shape::Cube { side: 1.0 })), 3).unwrap(),
        );
        let mut p = CloudPath::sample(&f, &CloudOptions::new(1000), 2, 0).unwrap();
        let cur = p.moments(false).unwrap();
        assert!(cur.m.a.amax() < 1e-12);
        assert!((cur.m.cov.clone() - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn stops_on_trace_tolerance() {
        let f = gauss(1);
        let mut s = Schedule::new(0.01, 50.0);
        s.stop_trace = 1e-2;
        let tr = run_trajectory(&f, &closed(), &s, 0, 0, &Observers::default()).unwrap();
        assert_eq!(tr.stop, StopReason::TraceTolerance);
        assert!(tr.last().cov[(0, 0)] < 1e-2);
        assert!(tr.last().t < 5.0);
    }

    #[test]
    fn records_strictly_increasing_and_deterministic() {
        let f = gauss(2);
        let s = Schedule::new(1e-2, 1.0).with_stride(7);
        let a = run_trajectory(&f, &closed(), &s, 42, 3, &Observers::default()).unwrap();
        let b = run_trajectory(&f, &closed(), &s, 42, 3, &Observers::default()).unwrap();
        assert!(a.records.windows(2).all(|w| w[1].t > w[0].t));
        assert_eq!(a.records, b.records);
        assert!((a.last().t - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(Schedule::new(0.0, 1.0).validate().is_err());
        assert!(Schedule::new(0.1, 0.01).validate().is_err());
        let f = gauss(1);
        let r = run_trajectory(&f, &closed(), &Schedule::new(0.0, 1.0), 0, 0, &Observers::default());
        assert!(matches!(r, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn anisotropic_input_rejected() {
        let f = Arc::new(
            make_density(&DensitySpec::UniformBody(BodySpec::new(Shape::Cube { side: 1.0 })), 2).unwrap(),
        );
        let r = run_trajectory(&f, &PathSpec::Tilt { strategy: MomentStrategy::grid() }, &Schedule::new(0.1, 0.2), 0, 0, &Observers::default());
        assert!(matches!(r, Err(Error::AnisotropicInput(_))));
    }

    #[test]
    fn refinement_preserves_endpoint_noise() {
        // The Gaussian barycenter is a_t = ∫ e^{-(t-s)/2}... driven linearly by
        // the noise, so coarse and refined runs agree to O(dt).
        let f = gauss(1);
        let coarse = Schedule::new(0.02, 1.0);
        let mut fine = Schedule::new(0.01, 1.0);
        fine.refine = 1;
        let a = run_trajectory(&f, &closed(), &coarse, 8, 0, &Observers::default()).unwrap();
        let b = run_trajectory(&f, &closed(), &fine, 8, 0, &Observers::default()).unwrap();
        assert!((a.last().a[0] - b.last().a[0]).abs() < 0.05);
    }

    #[test]
    fn guard_splits_large_kicks() {
        let f = gauss(1);
        let mut s = Schedule::new(0.5, 1.0);
        s.guard = 0.1;
        s.max_depth = 3;
        let tr = run_trajectory(&f, &closed(), &s, 1, 0, &Observers::default()).unwrap();
        assert!(tr.guard_splits > 0);
        assert!((tr.last().t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cloud_is_reported() {
        let f = gauss(1);
        let mut opts = CloudOptions::new(50);
        opts.min_neff = 45.0;
        let tr = run_trajectory(&f, &PathSpec::Cloud(opts.clone()), &Schedule::new(0.01, 1.0), 0, 0, &Observers::default())
            .unwrap();
        assert!(!tr.warnings.is_empty());
        opts.abort_on_degenerate = true;
        let r = run_trajectory(&f, &PathSpec::Cloud(opts), &Schedule::new(0.01, 1.0), 0, 0, &Observers::default());
        assert!(matches!(r, Err(Error::DegenerateCloud { .. })));
    }
}
