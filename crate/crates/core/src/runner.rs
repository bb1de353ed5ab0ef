//! Experiment orchestration: builds densities from a config, runs the
//! ensembles, and writes per-run CSV files, a summary and a manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind, StrategyName};
use crate::constants::{constants_report, Estimator};
use crate::coupling::{
    coupled_martingales, drift_diagnostic, d_matrix_excess, run_coupled, sup_convolution, wasserstein_coupling,
    CoupledProblem, CoupledTrajectory, DRIFT_MIN_RUNS,
};
use crate::diagnostics::{
    all_pass, atilde_domination, barycenter_qv, brascamp_lieb_ceiling, burn_in, gaussian_b_error, gaussian_cov_error,
    mass_deviation, opnorm_envelope, probe_martingale, trace_identity_check, Check, Summary,
};
use crate::engine::{run_with_noise, CloudOptions, Observers, PathSpec, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{BodySpec, Shape};
use crate::isoperimetry::{median_halfspace, variance_bound_check, VarianceOptions};
use crate::measures::{make_density, make_isotropic, DensitySpec, Factor1d, LogDensity};
use crate::noise::Noise;
use crate::stats::mean_se;
use crate::tilt::{default_strategy, MomentStrategy};

/// First line of every CSV file.
pub const CSV_VERSION_LINE: &str = "# sloc-csv v1";

const MIN_RUNS_FOR_Z: usize = 30;

/// Names accepted in `battery`, in registry order.
pub const BATTERY: &[&str] = &[
    "gaussian",
    "cube",
    "ball",
    "simplex",
    "cube-ball",
    "halfspace-cube",
    "uniform-product",
    "exp-product",
];

pub fn battery_density(name: &str) -> Option<DensitySpec> {
    let body = |shape| DensitySpec::UniformBody(BodySpec { shape, center: None });
    Some(match name {
        "gaussian" => DensitySpec::StandardGaussian,
        "cube" => body(Shape::Cube { side: 1.0 }),
        "ball" => body(Shape::Ball { radius: 1.0 }),
        "simplex" => body(Shape::Simplex { side: 1.0 }),
        "cube-ball" => body(Shape::CubeTruncatedByBall { side: 2.0, radius: 1.2 }),
        "halfspace-cube" => body(Shape::HalfspaceTruncation { side: 2.0, offset: 0.5 }),
        "uniform-product" => DensitySpec::Product1d { factors: vec![Factor1d::Uniform] },
        "exp-product" => DensitySpec::Product1d { factors: vec![Factor1d::Exponential] },
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Abort on the first failed run instead of recording it.
    pub fail_fast: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeed {
    pub run: u64,
    pub seed: u64,
    /// Noise stream within the seed.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: ExperimentKind,
    pub id: String,
    pub config_hash: String,
    pub version: String,
    pub seed: Option<u64>,
    pub runs: Vec<RunSeed>,
    pub started_at: u64,
    pub finished_at: u64,
    pub files: Vec<FileEntry>,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub summary: Summary,
    pub dir: PathBuf,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.manifest.passed
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of the config, leaving out the output
/// directory, which does not affect results.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let config = ExperimentConfig { out: None, ..config.clone() };
    sha256_hex(&serde_json::to_vec(&config).expect("config serializes"))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    opts: RunOptions,
    dir: PathBuf,
    files: Vec<FileEntry>,
    failures: Vec<String>,
    warnings: Vec<String>,
    seeds: Vec<RunSeed>,
    summary: Summary,
}

impl Context<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(FileEntry { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(0)
    }

    fn check(&mut self, name: &str, check: Check) {
        self.summary.insert(name.to_string(), check);
    }

    /// Record a diagnostic, turning a too-small ensemble into a warning and
    /// any other error into a failed check.
    fn check_result(&mut self, name: &str, r: Result<Check>) {
        match r {
            Ok(c) => self.check(name, c),
            Err(Error::InsufficientRuns { got, need }) => {
                self.warn(format!("{name}: skipped, {got} runs available and {need} needed"))
            }
            Err(e) => {
                self.warn(format!("{name}: {e}"));
                self.check(name, Check::pass(f64::NAN, false));
            }
        }
    }

    /// Run `0..runs` in parallel, keeping run order. Failed runs are recorded
    /// unless fail-fast is set.
    fn ensemble<T: Send>(&mut self, runs: u64, job: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        let seed = self.seed();
        let results: Vec<Result<T>> = (0..runs).into_par_iter().map(&job).collect();
        let mut out = Vec::with_capacity(results.len());
        for (run, r) in results.into_iter().enumerate() {
            self.seeds.push(RunSeed { run: run as u64, seed, stream: run as u64 });
            match r {
                Ok(v) => out.push(v),
                Err(e) if self.opts.fail_fast => return Err(e),
                Err(e) => {
                    let msg = format!("run {run}: {e}");
                    warn!("{msg}");
                    self.failures.push(msg);
                }
            }
        }
        let distinct: BTreeSet<(u64, u64)> = self.seeds.iter().map(|s| (s.seed, s.stream)).collect();
        if distinct.len() != self.seeds.len() {
            self.warn("two runs share a seed stream".into());
        }
        Ok(out)
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn csv_bytes(header: &[String], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut buf = format!("{CSV_VERSION_LINE}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row.iter().map(|x| fmt_f64(*x))).map_err(io)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

/// `t, V, a_i, A upper triangle, eigenvalues, N_eff, Tr Ã` per record.
pub fn trajectory_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    let n = traj.dim;
    let mut header = vec!["t".to_string(), "V".to_string()];
    header.extend((1..=n).map(|i| format!("a_{i}")));
    for i in 1..=n {
        header.extend((i..=n).map(|j| format!("A_{i}_{j}")));
    }
    header.extend((1..=n).map(|i| format!("eig_{i}")));
    header.push("N_eff".into());
    header.push("traceAtilde".into());
    let rows: Vec<Vec<f64>> = traj
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.t, r.v()];
            row.extend(r.a.iter());
            for i in 0..n {
                row.extend((i..n).map(|j| r.cov[(i, j)]));
            }
            row.extend(r.eigvals.iter());
            row.push(r.n_eff);
            row.push(r.trace_atilde());
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// `t, S, |a−b|², ‖D‖²_HS, ∫‖D‖²_HS, Tr A, Tr C` and the event flags of a
/// coupled run.
pub fn coupled_csv(traj: &CoupledTrajectory, eps: f64, op_cap: f64) -> Result<Vec<u8>> {
    let header: Vec<String> =
        ["t", "S", "gap_sq", "D_hs_sq", "int_D_hs_sq", "trA", "trC", "d_matrix_excess", "mass_cap_ok", "op_cap_ok"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    let cap = 2.0 * traj.k / eps;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let rows: Vec<Vec<f64>> = traj
        .records
        .iter()
        .map(|r| {
            vec![
                r.t,
                r.s,
                r.gap_sq,
                r.d_hs_sq,
                r.int_d,
                r.cov_a.trace(),
                r.cov_c.trace(),
                r.d_hs_sq - r.d_matrix_rhs,
                flag(r.s_max <= cap),
                flag(r.op_ratio_max <= op_cap),
            ]
        })
        .collect();
    csv_bytes(&header, &rows)
}

fn schedule_of(config: &ExperimentConfig) -> Schedule {
    let dt = config.dt.unwrap_or(1e-3);
    let t_max = config.t_max.unwrap_or(dt);
    let stride = config.stride.unwrap_or_else(|| ((t_max / dt / 200.0).round() as usize).max(1));
    Schedule::new(dt, t_max).with_stride(stride)
}

fn path_of(config: &ExperimentConfig, f: &LogDensity) -> PathSpec {
    match config.strategy {
        StrategyName::Auto => match default_strategy(f) {
            MomentStrategy::GridQuadrature { .. } => {
                PathSpec::Tilt { strategy: MomentStrategy::GridQuadrature { order: config.order() } }
            }
            s => PathSpec::Tilt { strategy: s },
        },
        StrategyName::ClosedForm => PathSpec::Tilt { strategy: MomentStrategy::ClosedFormGaussian },
        StrategyName::Grid => PathSpec::Tilt { strategy: MomentStrategy::GridQuadrature { order: config.order() } },
        StrategyName::Cloud => PathSpec::Cloud(CloudOptions::new(config.particles.unwrap_or(100))),
    }
}

/// Origin, half a unit along the first axis, and half a unit along the
/// negative diagonal.
fn probe_points(n: usize) -> Vec<DVector<f64>> {
    let mut e1 = DVector::zeros(n);
    e1[0] = 0.5;
    let diag = DVector::from_element(n, -0.5 / (n as f64).sqrt());
    vec![DVector::zeros(n), e1, diag]
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("out").join(config.id()))
}

/// Run the configured experiment and write its artifacts.
pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<Outcome> {
    config.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let dir = out_dir(config);
    fs::create_dir_all(&dir)?;
    let hash = config_hash(config);
    let mut ctx = Context {
        config,
        opts,
        dir: dir.clone(),
        files: Vec::new(),
        failures: Vec::new(),
        warnings: Vec::new(),
        seeds: Vec::new(),
        summary: Summary::new(),
    };
    if let Ok(text) = fs::read_to_string(dir.join(MANIFEST_FILE)) {
        if let Ok(prev) = serde_json::from_str::<RunManifest>(&text) {
            if prev.seed.is_some() && prev.seed == config.seed && prev.config_hash != hash {
                ctx.warn(format!("seed {} reused with a different config in {}", config.seed.unwrap_or(0), dir.display()));
            }
        }
    }
    let started_at = unix_now();
    info!("{} -> {}", config.id(), dir.display());
    match config.experiment {
        ExperimentKind::Simulate => simulate(&mut ctx, false)?,
        ExperimentKind::GaussianCheck => simulate(&mut ctx, true)?,
        ExperimentKind::Constants => constants(&mut ctx)?,
        ExperimentKind::Isoperimetry => isoperimetry(&mut ctx)?,
        ExperimentKind::Couple => couple(&mut ctx)?,
        ExperimentKind::Report => report(&mut ctx)?,
    }
    if config.experiment.needs_schedule() {
        let ok = ctx.failures.is_empty();
        ctx.check("runs_completed", Check::pass((ctx.seeds.len() - ctx.failures.len()) as f64, ok));
    }
    let summary_bytes = serde_json::to_vec_pretty(&ctx.summary).map_err(|e| Error::Io(e.to_string()))?;
    ctx.write(SUMMARY_FILE, &summary_bytes)?;
    let passed = all_pass(&ctx.summary) && ctx.failures.is_empty();
    let manifest = RunManifest {
        experiment: config.experiment,
        id: config.id().to_string(),
        config_hash: hash,
        version: format!("sloc-core {}", env!("CARGO_PKG_VERSION")),
        seed: config.seed,
        runs: ctx.seeds,
        started_at,
        finished_at: unix_now(),
        files: ctx.files,
        failures: ctx.failures,
        warnings: ctx.warnings,
        passed,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), bytes)?;
    Ok(Outcome { manifest, summary: ctx.summary, dir })
}

fn file_stem(config: &ExperimentConfig) -> String {
    format!("{}-seed{}", config.id(), config.seed.unwrap_or(0))
}

/// z-scores from a handful of runs say nothing, so they are only reported.
fn z_check(runs: usize, z: f64, limit: f64) -> Check {
    if runs < MIN_RUNS_FOR_Z {
        Check::report(z)
    } else {
        Check::pass(z, z <= limit)
    }
}

fn simulate(ctx: &mut Context<'_>, gaussian: bool) -> Result<()> {
    let config = ctx.config;
    let n = config.n.unwrap_or(1);
    let f = if gaussian {
        make_density(&DensitySpec::StandardGaussian, n)?
    } else {
        make_isotropic(config.density.as_ref().expect("validated"), n)?
    };
    let f = Arc::new(f);
    let path = path_of(config, &f);
    let cloud = matches!(path, PathSpec::Cloud(_));
    let schedule = schedule_of(config);
    // The reference-rule mass check only means something on the quadrature path.
    let quadrature = matches!(path, PathSpec::Tilt { strategy: MomentStrategy::GridQuadrature { .. } });
    let obs = Observers { probes: probe_points(n), kappa: false, mass_check: quadrature, ..Observers::default() };
    let seed = ctx.seed();
    let noise = Noise::new(seed, n);
    crate::engine::check_isotropic(&f)?;
    let runs = ctx.ensemble(config.runs.unwrap_or(1), |r| run_with_noise(&f, &path, &schedule, &noise, seed, r, &obs))?;
    let stem = file_stem(config);
    for traj in &runs {
        for w in &traj.warnings {
            ctx.warnings.push(format!("run {}: {w}", traj.run));
        }
        ctx.write(&format!("{stem}-run{:04}.csv", traj.run), &trajectory_csv(traj)?)?;
    }
    if runs.is_empty() {
        return Ok(());
    }
    let tol = config.tolerances.clone();
    ctx.check_result(
        "trace_identity.max_z",
        trace_identity_check(&runs).map(|r| Check::pass(r.max_z, r.max_z <= tol.z())),
    );
    ctx.check_result(
        "probe_martingale.final_z",
        probe_martingale(&runs).map(|r| z_check(runs.len(), r.final_z, tol.z())),
    );
    ctx.check_result("probe_martingale.max_z", probe_martingale(&runs).map(|r| Check::report(r.max_z)));
    if let Some(dev) = mass_deviation(&runs) {
        ctx.check("mass.max_deviation", Check::pass(dev, dev <= tol.mass()));
    }
    let bl = brascamp_lieb_ceiling(&runs);
    ctx.check("brascamp_lieb.max_product", Check::pass(bl, bl <= tol.bl_ceiling()));
    ctx.check("atilde_domination.min_eig", Check::report(atilde_domination(&runs)));
    ctx.check_result("opnorm_envelope.rate", opnorm_envelope(&runs, burn_in(0.0, n, 0.5)).map(|e| Check::report(e.rate)));
    ctx.check_result("barycenter_qv.max_rel_gap", barycenter_qv(&runs, 0.1, 0.2).map(|q| Check::report(q.max_rel_gap)));
    if cloud {
        let min = runs.iter().flat_map(|r| r.records.iter()).map(|r| r.n_eff).fold(f64::INFINITY, f64::min);
        ctx.check("cloud.min_n_eff", Check::report(min));
    }
    if gaussian {
        let cov = gaussian_cov_error(&runs);
        let limit = if cloud { tol.gaussian_cov_cloud() } else { tol.gaussian_cov() };
        ctx.check("gaussian.cov_rel_error", Check::pass(cov, cov < limit));
        ctx.check("gaussian.b_rel_error", Check::report(gaussian_b_error(&runs)));
        if schedule.t_max >= 1.0 - 1e-9 {
            barycenter_variance(ctx, &runs);
        }
    }
    Ok(())
}

/// `Var(a_1)` against `1 − e^{-1}` pooled over coordinates. Asserted only
/// when at least a thousand samples are pooled.
fn barycenter_variance(ctx: &mut Context<'_>, runs: &[Trajectory]) {
    let mut samples = Vec::new();
    for r in runs {
        let rec = r.at(1.0);
        if (rec.t - 1.0).abs() > 1e-6 {
            continue;
        }
        samples.extend(rec.a.iter().copied());
    }
    if samples.len() < 2 {
        return;
    }
    let target = 1.0 - (-1f64).exp();
    // Coordinates are independent, so pooling keeps the mean-zero variance.
    let v = samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64;
    let se = v * (2.0 / samples.len() as f64).sqrt();
    let rel = v / target - 1.0;
    let check = if samples.len() >= 1000 {
        Check::pass(v, rel.abs() <= ctx.config.tolerances.barycenter_var())
    } else {
        Check::report(v)
    };
    ctx.check("gaussian.barycenter_var_t1", check.with_ci(v - 2.0 * se, v + 2.0 * se));
}

fn constants(ctx: &mut Context<'_>) -> Result<()> {
    let config = ctx.config;
    let n = config.n.unwrap_or(1);
    let seed = ctx.seed();
    let mut entries: Vec<(String, DensitySpec)> = config
        .battery
        .iter()
        .map(|name| (name.clone(), battery_density(name).expect("validated")))
        .collect();
    if let Some(d) = &config.density {
        entries.push(("density".into(), d.clone()));
    }
    let ladder: Vec<usize> = (1..=n).collect();
    let tol = config.tolerances.kappa_q();
    for (name, spec) in entries {
        let result = make_isotropic(&spec, n).and_then(|f| constants_report(&f, Estimator::auto(n, seed), &ladder, tol, seed));
        match result {
            Ok(r) => {
                let bytes = serde_json::to_vec_pretty(&r).map_err(|e| Error::Io(e.to_string()))?;
                ctx.write(&format!("{}-{name}-n{n}.json", config.id()), &bytes)?;
                ctx.check(&format!("{name}.kappa_q_ratio"), Check::pass(r.kappa_q.ratio, r.kappa_q.pass));
                ctx.check(&format!("{name}.kappa"), Check::report(r.k_stat.kappa));
                ctx.check(&format!("{name}.q"), Check::report(r.q_stat.q));
                let (s2, h) = (r.sigma_stat.s_sq, r.sigma_stat.ci);
                ctx.check(&format!("{name}.sigma_sq"), Check::report(s2).with_ci(s2 - h, s2 + h));
            }
            Err(e) if ctx.opts.fail_fast => return Err(e),
            Err(e) => {
                ctx.failures.push(format!("{name}: {e}"));
                ctx.check(&format!("{name}.kappa_q_ratio"), Check::pass(f64::NAN, false));
            }
        }
    }
    Ok(())
}

fn isoperimetry(ctx: &mut Context<'_>) -> Result<()> {
    let config = ctx.config;
    let n = config.n.unwrap_or(1);
    let seed = ctx.seed();
    let f = Arc::new(make_isotropic(config.density.as_ref().expect("validated"), n)?);
    let normals = if config.isoperimetry.normals.is_empty() {
        let mut e1 = vec![0.0; n];
        e1[0] = 1.0;
        vec![e1]
    } else {
        config.isoperimetry.normals.clone()
    };
    let sets = normals.iter().map(|nu| median_halfspace(&f, nu, seed)).collect::<Result<Vec<_>>>()?;
    let path = path_of(config, &f);
    let schedule = schedule_of(config);
    let obs = Observers { sets, ..Observers::default() };
    let noise = Noise::new(seed, n);
    crate::engine::check_isotropic(&f)?;
    let runs = ctx.ensemble(config.runs.unwrap_or(1), |r| run_with_noise(&f, &path, &schedule, &noise, seed, r, &obs))?;
    let opts = VarianceOptions {
        slack: config.tolerances.variance_slack(),
        window: config.isoperimetry.window,
        min_runs: 2,
        band_until: config.isoperimetry.band_until,
    };
    let stem = file_stem(config);
    for k in 0..normals.len() {
        let vb = match variance_bound_check(&runs, k, opts) {
            Ok(vb) => vb,
            Err(e) => {
                ctx.check_result(&format!("set{k}.variance"), Err(e));
                continue;
            }
        };
        let header: Vec<String> =
            ["t", "mean_g", "var_g", "mean_sq_dev", "qv_rate", "band_frequency"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<f64>> = (0..vb.t.len())
            .map(|i| {
                let t = vb.t[i];
                let rate = vb
                    .qv_rate
                    .iter()
                    .rev()
                    .find(|(s, _)| *s <= t + 1e-12 && t < s + opts.window - 1e-12)
                    .map_or(f64::NAN, |r| r.1);
                let var_g = vb.mean_sq_dev[i] - (vb.mean_g[i] - 0.5).powi(2);
                vec![t, vb.mean_g[i], var_g, vb.mean_sq_dev[i], rate, vb.band_frequency[i]]
            })
            .collect();
        ctx.write(&format!("{stem}-set{k}.csv"), &csv_bytes(&header, &rows)?)?;
        let ratio = vb
            .t
            .iter()
            .zip(&vb.mean_sq_dev)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, m)| m / t)
            .fold(0.0, f64::max);
        ctx.check(&format!("set{k}.variance_ratio"), Check::pass(ratio, vb.variance_pass));
        let cap = 1.0 + config.tolerances.variance_slack();
        ctx.check(&format!("set{k}.qv_rate_max"), Check::pass(vb.max_qv_rate, vb.max_qv_rate <= cap));
        ctx.check(&format!("set{k}.martingale"), Check::pass(vb.g0, vb.martingale_pass));
        ctx.check(&format!("set{k}.band"), Check::pass(vb.band_frequency.first().copied().unwrap_or(f64::NAN), vb.band_pass));
    }
    if runs.len() < VarianceOptions::default().min_runs {
        ctx.warn(format!("{} runs; at least {} are recommended", runs.len(), VarianceOptions::default().min_runs));
    }
    Ok(())
}

fn couple(ctx: &mut Context<'_>) -> Result<()> {
    let config = ctx.config;
    let n = config.n.unwrap_or(1);
    let seed = ctx.seed();
    let co = config.couple.clone();
    let f_spec = config.density.as_ref().expect("validated");
    let g_spec = config.target.as_ref().expect("validated");
    let f = Arc::new(make_isotropic(f_spec, n)?);
    let g = Arc::new(if g_spec == f_spec { make_isotropic(g_spec, n)? } else { make_density(g_spec, n)? });
    let sup = sup_convolution(&f, &g, co.h_order)?;
    let problem = CoupledProblem::new(&f, &g, &sup, Estimator::Quadrature { order: co.order })?;
    let schedule = schedule_of(config);
    let runs = ctx.ensemble(config.runs.unwrap_or(1), |r| run_coupled(&problem, &schedule, seed, r))?;
    let stem = file_stem(config);
    for traj in &runs {
        ctx.write(&format!("{stem}-run{:04}.csv", traj.run), &coupled_csv(traj, co.eps, co.op_cap)?)?;
    }
    if runs.is_empty() {
        return Ok(());
    }
    let tol = config.tolerances.clone();
    ctx.check("coupling.k", Check::report(runs[0].k));
    let excess = d_matrix_excess(&runs);
    ctx.check("coupling.d_matrix_excess", Check::pass(excess, excess <= tol.d_matrix()));
    if g_spec == f_spec {
        let worst = runs
            .iter()
            .flat_map(|r| r.records.iter())
            .map(|r| r.gap_sq.sqrt().max(r.d_hs_sq.sqrt()))
            .fold(0.0, f64::max);
        ctx.check("coupling.identical_gap", Check::pass(worst, worst <= 1e-10));
    }
    ctx.check_result(
        "coupling.s_martingale_z",
        coupled_martingales(&runs).map(|m| z_check(runs.len(), m.s_max_z, tol.z())),
    );
    ctx.check_result(
        "coupling.mass_martingale_z",
        coupled_martingales(&runs).map(|m| z_check(runs.len(), m.mass_max_z, tol.z())),
    );
    if runs.len() >= DRIFT_MIN_RUNS {
        match drift_diagnostic(&runs, tol.drift_rel(), tol.drift_qv()) {
            Ok(d) => {
                let last = d.t.len() - 1;
                let (lhs, rhs, se) = (d.gap_sq[last], d.int_d[last], d.se[last]);
                ctx.check(
                    "coupling.optional_stopping",
                    Check::pass(lhs - rhs, d.identity_pass).with_ci(lhs - rhs - 3.0 * se, lhs - rhs + 3.0 * se),
                );
                ctx.check("coupling.qv_gap", Check::pass(d.qv_gap, d.qv_pass));
            }
            Err(e) => ctx.check_result("coupling.optional_stopping", Err(e)),
        }
    } else {
        ctx.warn(format!("optional-stopping identity needs {DRIFT_MIN_RUNS} runs, got {}", runs.len()));
    }
    let t_end = runs.iter().map(|r| r.records.last().map_or(0.0, |x| x.t)).fold(f64::INFINITY, f64::min);
    match wasserstein_coupling(&runs, t_end, co.eps, co.op_cap) {
        Ok(w) => {
            ctx.check("coupling.w2_bound", Check::report(w.bound));
            ctx.check("coupling.kept_fraction", Check::report(w.kept_fraction));
        }
        Err(e) => ctx.warn(format!("coupling.w2_bound: {e}")),
    }
    let gaps: Vec<f64> = runs.iter().filter_map(|r| r.records.last()).map(|r| r.gap_sq).collect();
    let (m, se) = mean_se(&gaps);
    ctx.check("coupling.final_gap_sq", Check::report(m).with_ci(m - 2.0 * se, m + 2.0 * se));
    Ok(())
}

/// Merge the summaries of earlier runs, prefixing each check with the
/// directory name.
fn report(ctx: &mut Context<'_>) -> Result<()> {
    let inputs = if ctx.config.report.inputs.is_empty() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&ctx.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(SUMMARY_FILE).is_file())
            .collect();
        dirs.sort();
        dirs
    } else {
        ctx.config.report.inputs.clone()
    };
    if inputs.is_empty() {
        return Err(Error::InvalidSpec(format!("no summaries found under {}", ctx.dir.display())));
    }
    for dir in inputs {
        let summary = read_summary(&dir)?;
        let prefix = dir.file_name().map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into_owned());
        for (k, v) in summary {
            ctx.check(&format!("{prefix}/{k}"), v);
        }
    }
    Ok(())
}

pub fn read_summary(dir: &FsPath) -> Result<Summary> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}
