mod common;

use common::degenerate;
use gdnls::dynamics::{
    build_unstable_data, eps_equation_residual, evolve, evolve_observed, exact_solution_error, parameter_rates,
    prepare_degenerate, run_branch, track_modulation, virial_coefficients, virial_series, InstabilityConfig, Scheme,
    SimConfig,
};
use gdnls::grid::{fourier_shift, ComplexField, GridSpec};
use gdnls::modulation::{DecomposeOptions, Decomposer};
use gdnls::par::Execution;
use num_complex::Complex64;

fn exact(t: f64) -> ComplexField {
    let s = degenerate();
    let p = s.profile.params;
    fourier_shift(&s.profile.q, -p.speed * t).scale_c(Complex64::from_polar(1.0, p.omega * t))
}

fn decomposer() -> Decomposer {
    let s = degenerate();
    Decomposer::new(&s.profile, &s.phi, s.xi, DecomposeOptions::default())
}

#[test]
fn eps_residual_vanishes_on_the_exact_soliton() {
    let s = degenerate();
    let dec = decomposer();
    for (t, h) in [(0.3, 2e-3), (2.0, 1e-2)] {
        let s0 = dec.decompose_raw(&exact(t), None).unwrap();
        let s1 = dec.decompose_raw(&exact(t + h), None).unwrap();
        let r = eps_equation_residual(&s0, &s1, h, &s.profile, &s.phi, s.xi);
        assert!(r.total < 1e-6, "t = {t}: {r:?}");
    }
}

/// Residuals at pair spacings 2e−3 and 4e−3 at t = 1 on the λ₀ = 0.05 run.
fn residual_pair(dealias: f64) -> (f64, f64, f64) {
    let s = degenerate();
    let u0 = build_unstable_data(&s.profile, &s.phi, s.xi, 0.05).unwrap();
    let cfg = SimConfig { stride: 1, dealias, ..SimConfig::new(s.profile.grid, s.profile.params, 5e-4, 1.01) };
    let mut keep = Vec::new();
    evolve_observed(&cfg, &u0, None, &mut |t, u| {
        let step = (t / 5e-4).round() as usize;
        if [2000, 2004, 2008].contains(&step) {
            keep.push(u.clone());
        }
        true
    })
    .unwrap();
    let dec = decomposer();
    let st: Vec<_> = keep.iter().map(|u| dec.decompose_raw(u, None).unwrap()).collect();
    let coarse = eps_equation_residual(&st[0], &st[2], 4e-3, &s.profile, &s.phi, s.xi);
    let fine = eps_equation_residual(&st[0], &st[1], 2e-3, &s.profile, &s.phi, s.xi);
    (coarse.total, fine.total, fine.relative)
}

#[test]
fn eps_residual_is_second_order_in_the_pair_spacing() {
    // without truncation the run solves the full equation and only the
    // differencing error remains
    let (coarse, fine, _) = residual_pair(1.0);
    assert!((3.5..4.5).contains(&(coarse / fine)), "{coarse:e} {fine:e}");
    // the 2/3 rule leaves a floor set by the spectral tail beyond the cutoff
    let (_, fine, relative) = residual_pair(2.0 / 3.0);
    assert!(fine < 5e-5 && relative < 3e-4, "{fine:e} {relative:e}");
}

#[test]
fn soliton_run_tracks_exactly() {
    let s = degenerate();
    let mut cfg = SimConfig::new(s.profile.grid, s.profile.params, 1e-3, 5.0);
    cfg.stride = 100;
    let mut snaps = Vec::new();
    let rec = evolve_observed(&cfg, &s.profile.q, Some(1), &mut |_, _| true).unwrap();
    for (t, u) in &rec.snapshots {
        snaps.push((*t, u.clone()));
    }
    assert_eq!(snaps.len(), 51);
    let worst = snaps.iter().map(|(t, u)| exact_solution_error(u, &s.profile, *t)).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst:e}");
    assert!(rec.mass_drift() < 1e-8 && rec.energy_drift() < 1e-8);

    let coeffs = virial_coefficients(&s.profile, &s.phi, s.xi).unwrap();
    let series = track_modulation(&snaps, decomposer(), coeffs);
    assert!(series.exit_time.is_none());
    assert_eq!(series.samples.len(), snaps.len());
    assert!(series.samples.iter().all(|m| m.lambda.abs() < 1e-6));
    let rates = parameter_rates(&series.samples, &s.profile.params);
    for r in &rates.rates {
        assert!(r.lambda_dot.abs() < 1e-5 && r.y_dot_minus_c.abs() < 1e-5 && r.gamma_dot_plus_omega.abs() < 1e-5, "{r:?}");
    }
    let v = virial_series(&series.samples, s.d3);
    assert!(v.i.iter().all(|i| i.abs() < 1e-6));
}

#[test]
fn schemes_agree_and_etd_is_more_accurate() {
    let s = degenerate();
    let mut errs = Vec::new();
    for scheme in [Scheme::IfRk4, Scheme::Etdrk4] {
        let mut cfg = SimConfig::new(s.profile.grid, s.profile.params, 2e-3, 1.0);
        cfg.scheme = scheme;
        cfg.stride = 500;
        let mut last = None;
        evolve_observed(&cfg, &s.profile.q, None, &mut |t, u| {
            last = Some((t, u.clone()));
            true
        })
        .unwrap();
        let (t, u) = last.unwrap();
        assert_eq!(t, 1.0);
        errs.push(exact_solution_error(&u, &s.profile, t));
    }
    assert!(errs[0] < 1e-4 && errs[1] < errs[0], "{errs:?}");
}

#[test]
fn cfl_guard_refines_the_step() {
    let g = GridSpec::new(60.0, 1024).unwrap();
    let s = degenerate();
    let u0 = s.profile.q.scale(3.0);
    let mut cfg = SimConfig::new(g, s.profile.params, 1e-3, 2e-3);
    cfg.stride = 1;
    cfg.mass_blowup = 1.0;
    cfg.mass_halt = 1.0;
    let rec = evolve(&cfg, &u0).unwrap();
    let peak = u0.max_abs().powi(3);
    assert!(!rec.notes.is_empty());
    assert!(rec.dt_used <= 0.5 * g.dx() / peak * 1.5, "{} vs {}", rec.dt_used, 0.5 * g.dx() / peak);
    assert!(rec.dt_used < 1e-3);
}

#[test]
fn initial_field_must_live_on_the_config_grid() {
    let s = degenerate();
    let other = GridSpec::new(60.0, 512).unwrap();
    let cfg = SimConfig::new(other, s.profile.params, 1e-3, 0.1);
    assert!(evolve(&cfg, &s.profile.q).is_err());
}

#[test]
fn perturbed_rate_constant_is_stable_under_stride_halving() {
    let cfg = InstabilityConfig {
        length: 60.0,
        count: 1024,
        coercivity_length: 50.0,
        coercivity_count: 128,
        t_max: 3.0,
        run_control: false,
        run_negative: false,
        ..Default::default()
    };
    let setup = prepare_degenerate(1.5, 1.0, &cfg.grid().unwrap(), &cfg.coercivity_grid().unwrap(), Execution::Parallel)
        .unwrap();
    let a = run_branch(&setup, &cfg, 0.05, 3.0, false).unwrap();
    let half = InstabilityConfig { sample_interval: 0.05, ..cfg.clone() };
    let b = run_branch(&setup, &half, 0.05, 3.0, false).unwrap();
    assert!(a.rate_constant.is_finite() && a.rate_constant > 0.0);
    let r = b.rate_constant / a.rate_constant;
    assert!((0.8..1.2).contains(&r), "{} vs {}", a.rate_constant, b.rate_constant);
    assert!(a.series.samples.iter().all(|m| m.lambda >= 0.025));
    assert!(a.mass_drift < 1e-8);
}

#[test]
fn snapshots_are_taken_at_requested_times() {
    let cfg = InstabilityConfig {
        length: 60.0,
        count: 512,
        coercivity_length: 50.0,
        coercivity_count: 128,
        t_max: 0.5,
        snapshot_times: vec![0.25, 0.0],
        ..Default::default()
    };
    let setup = prepare_degenerate(1.5, 1.0, &cfg.grid().unwrap(), &cfg.coercivity_grid().unwrap(), Execution::Sequential)
        .unwrap();
    let b = run_branch(&setup, &cfg, cfg.lambda0, cfg.t_max, false).unwrap();
    let times: Vec<f64> = b.snapshots.iter().map(|(t, _)| *t).collect();
    assert_eq!(times.len(), 2);
    assert!(times[0].abs() < 1e-12 && (times[1] - 0.25).abs() < 1.5e-3, "{times:?}");
    // the −λ₀ branch does not store fields
    let n = run_branch(&setup, &cfg, -cfg.lambda0, 0.1, false).unwrap();
    assert!(n.snapshots.is_empty());
}
