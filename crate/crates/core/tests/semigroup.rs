//! Restarting the process from `f_s` and running for time `t` gives the same
//! law at `s + t` as an uninterrupted run.

use std::sync::Arc;

use sloc::engine::{run_with_noise, Observers, PathSpec, Schedule};
use sloc::geometry::{BodySpec, Shape};
use sloc::measures::{exact_moments, isotropize, make_isotropic, DensitySpec, Factor1d};
use sloc::noise::Noise;
use sloc::stats::ks_two_sample;
use sloc::tilt::{conditional_density_form, default_strategy, TiltState};

const S: f64 = 0.3;
const T: f64 = 0.5;
const DT: f64 = 0.005;
const RUNS: u64 = 300;

fn restart_matches_continuation(spec: DensitySpec) {
    let f = Arc::new(make_isotropic(&spec, 1).unwrap());
    let path = PathSpec::Tilt { strategy: default_strategy(&f) };
    let obs = Observers::default();
    let prefix_steps = (S / DT).round() as usize;

    // Continuations share the first `S/DT` increments of run 0.
    let shared = Noise::new(11, 1).with_shared_prefix(0, prefix_steps);
    let whole = Schedule::new(DT, S + T).with_stride(10);
    let direct: Vec<f64> = (1..=RUNS)
        .map(|r| run_with_noise(&f, &path, &whole, &shared, 11, r, &obs).unwrap().last().cov.trace())
        .collect();

    let head = run_with_noise(&f, &path, &Schedule::new(DT, S), &Noise::new(11, 1), 11, 0, &obs).unwrap();
    let last = head.last();
    assert!((last.t - S).abs() < 1e-9);
    let state = TiltState { t: S, c: last.c.clone(), b: last.b.clone() };
    let fs = conditional_density_form(&f, &state).unwrap();
    let (g, map) = isotropize(&fs, &exact_moments(&fs).unwrap()).unwrap();
    let g = Arc::new(g);
    let back = map.lin.clone().try_inverse().unwrap();
    let g_path = PathSpec::Tilt { strategy: default_strategy(&g) };
    let fresh = Noise::new(12, 1);
    let tail = Schedule::new(DT, T).with_stride(10);
    let restarted: Vec<f64> = (0..RUNS)
        .map(|r| {
            let traj = run_with_noise(&g, &g_path, &tail, &fresh, 12, r, &obs).unwrap();
            let cov = &traj.last().cov;
            (&back * cov * back.transpose()).trace()
        })
        .collect();

    let ks = ks_two_sample(&direct, &restarted);
    assert!(ks.p_value > 0.01, "KS statistic {} p {}", ks.statistic, ks.p_value);
}

#[test]
fn uniform_interval() {
    restart_matches_continuation(DensitySpec::UniformBody(BodySpec { shape: Shape::Cube { side: 1.0 }, center: None }));
}

#[test]
fn exponential() {
    restart_matches_continuation(DensitySpec::Product1d { factors: vec![Factor1d::Exponential] });
}
