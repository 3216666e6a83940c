//! The acceptance suite behind `gdnls verify` and the `acceptance` test target.

use std::sync::OnceLock;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::degeneracy::{det_contrast, f_scale, find_z0, sigma_grid, z0_sweep};
use crate::dynamics::{
    evolve_observed, exact_solution_error, prepare_degenerate, run_instability_with, DegenerateSetup, InstabilityConfig,
    SimConfig,
};
use crate::functionals::{action, action_hessian_form, action_third_form_at_q, apply_b, third_difference, third_identity};
use crate::grid::{h1_inner, ComplexField, GridSpec};
use crate::modulation::{
    action_expansion_probe, compose, project_out, renormalize_tangent, wrap_phase, wrap_translation, DecomposeOptions,
    Decomposer,
};
use crate::par::Execution;
use crate::sampling::{random_packets, random_packets_within, rng};
use crate::soliton::{build_profile, soliton_residual, tangent_vector, SolitonParams, SolitonProfile};

pub const CRITERIA: [u8; 11] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub summary: String,
    #[serde(skip)]
    pub seconds: f64,
    pub metrics: Value,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {}: {} ({:.1} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.summary,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    pub exec: Execution,
    pub instability: InstabilityConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 20240917, exec: Execution::Parallel, instability: InstabilityConfig::default() }
    }
}

type Checked = Result<(bool, String, Value), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Runs criteria on demand, sharing the degenerate-point setup between them.
pub struct Suite {
    opts: SuiteOptions,
    setup: OnceLock<Result<DegenerateSetup, String>>,
    transport: OnceLock<Result<Transport, String>>,
}

#[derive(Debug, Clone)]
struct Transport {
    sup_error: f64,
    final_error: f64,
    coarse_final_error: f64,
    mass_drift: f64,
    energy_drift: f64,
    momentum_drift: f64,
    momentum0: f64,
    seconds: f64,
}

fn title(id: u8) -> &'static str {
    match id {
        1 => "soliton exactness",
        2 => "exact-solution transport",
        3 => "conservation",
        4 => "degeneracy curve",
        5 => "third-derivative cross-check",
        6 => "cubic landscape",
        7 => "coercivity",
        8 => "decomposition round-trip",
        9 => "trilinear form",
        10 => "virial identities",
        11 => "instability experiment",
        _ => "unknown",
    }
}

fn fine_grid() -> GridSpec {
    GridSpec::new(80.0, 2048).expect("valid grid")
}

fn c_star(sigma: f64, omega: f64) -> Result<f64, String> {
    Ok(2.0 * find_z0(sigma).map_err(err)? * omega.sqrt())
}

fn direction(params: &SolitonParams, grid: &GridSpec, xi: [f64; 2]) -> Result<(SolitonProfile, ComplexField), String> {
    let prof = build_profile(params, grid).map_err(err)?;
    let tilde = tangent_vector(&prof, xi, None).map_err(err)?;
    let phi = renormalize_tangent(&prof, &tilde, xi).map_err(err)?.phi;
    Ok((prof, phi))
}

impl Suite {
    pub fn new(opts: SuiteOptions) -> Self {
        Self { opts, setup: OnceLock::new(), transport: OnceLock::new() }
    }

    fn setup(&self) -> Result<&DegenerateSetup, String> {
        let cfg = &self.opts.instability;
        self.setup
            .get_or_init(|| {
                let grid = cfg.grid().map_err(err)?;
                let coarse = cfg.coercivity_grid().map_err(err)?;
                prepare_degenerate(cfg.sigma, cfg.omega, &grid, &coarse, self.opts.exec).map_err(err)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn run(&self, id: u8) -> CriterionOutcome {
        let start = Instant::now();
        let result = match id {
            1 => self.soliton_exactness(),
            2 => self.transport_accuracy(),
            3 => self.conservation(),
            4 => self.degeneracy_curve(),
            5 => self.third_derivative(),
            6 => self.cubic_landscape(),
            7 => self.coercivity(),
            8 => self.round_trip(),
            9 => self.trilinear(),
            10 => self.virial_identities(),
            11 => self.instability(),
            _ => Err(format!("no criterion {id}")),
        };
        let seconds = start.elapsed().as_secs_f64();
        let (passed, summary, metrics) = result.unwrap_or_else(|e| (false, format!("error: {e}"), Value::Null));
        CriterionOutcome { id, title: title(id), passed, summary, seconds, metrics }
    }

    pub fn run_all(&self) -> Vec<CriterionOutcome> {
        CRITERIA.iter().map(|&id| self.run(id)).collect()
    }

    fn soliton_exactness(&self) -> Checked {
        let grid = fine_grid();
        let mut rows = Vec::new();
        let mut ok = true;
        for speed in [0.0, c_star(1.5, 1.0)?] {
            let start = Instant::now();
            let params = SolitonParams::new(1.5, 1.0, speed).map_err(err)?;
            let prof = build_profile(&params, &grid).map_err(err)?;
            let res = soliton_residual(&prof);
            let secs = start.elapsed().as_secs_f64();
            ok &= res < 1e-8 && secs < 1.0;
            rows.push(json!({"c": speed, "residual": res}));
        }
        let worst = rows.iter().map(|r| r["residual"].as_f64().unwrap_or(f64::NAN)).fold(0.0, f64::max);
        Ok((ok, format!("max relative residual {worst:.2e} (< 1e-8)"), json!(rows)))
    }

    fn transport(&self) -> Result<&Transport, String> {
        self.transport
            .get_or_init(|| {
                let start = Instant::now();
                let grid = fine_grid();
                let params = SolitonParams::new(1.5, 1.0, c_star(1.5, 1.0)?).map_err(err)?;
                let prof = build_profile(&params, &grid).map_err(err)?;
                let run = |dt: f64| -> Result<(f64, f64, crate::dynamics::TrajectoryRecord), String> {
                    let mut cfg = SimConfig::new(grid, params, dt, 5.0);
                    cfg.stride = (0.1 / dt).round() as usize;
                    let mut sup = 0.0f64;
                    let mut last = 0.0;
                    let rec = evolve_observed(&cfg, &prof.q, None, &mut |t, u| {
                        last = exact_solution_error(u, &prof, t);
                        sup = sup.max(last);
                        true
                    })
                    .map_err(err)?;
                    Ok((sup, last, rec))
                };
                let (sup, last, rec) = run(1e-3)?;
                let (_, coarse_last, _) = run(2e-3)?;
                Ok(Transport {
                    sup_error: sup,
                    final_error: last,
                    coarse_final_error: coarse_last,
                    mass_drift: rec.mass_drift(),
                    energy_drift: rec.energy_drift(),
                    momentum_drift: rec.momentum_drift(),
                    momentum0: rec.conserved.first().map_or(0.0, |s| s.momentum),
                    seconds: start.elapsed().as_secs_f64(),
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn transport_accuracy(&self) -> Checked {
        let t = self.transport()?;
        let ratio = t.coarse_final_error / t.final_error;
        let order = ratio.log2();
        let ok = t.sup_error < 1e-6 && (3.5..=4.5).contains(&order) && t.seconds < 60.0;
        Ok((
            ok,
            format!("sup H1 error {:.2e} (< 1e-6), dt-halving ratio {ratio:.1} (order {order:.2})", t.sup_error),
            json!({"sup_error": t.sup_error, "final_error": t.final_error, "coarse_final_error": t.coarse_final_error,
                   "halving_ratio": ratio, "order": order}),
        ))
    }

    fn conservation(&self) -> Checked {
        let t = self.transport()?;
        let p_tol = 1e-8 * (1.0 + t.momentum0.abs());
        let ok = t.mass_drift < 1e-8 && t.energy_drift < 1e-8 && t.momentum_drift < p_tol;
        Ok((
            ok,
            format!("mass {:.1e}, energy {:.1e}, momentum {:.1e} (< {p_tol:.1e})", t.mass_drift, t.energy_drift, t.momentum_drift),
            json!({"mass_drift": t.mass_drift, "energy_drift": t.energy_drift, "momentum_drift": t.momentum_drift}),
        ))
    }

    fn degeneracy_curve(&self) -> Checked {
        let start = Instant::now();
        let sigmas = sigma_grid(1.05, 1.95, 19);
        let rows = z0_sweep(&sigmas, self.opts.exec).into_iter().collect::<Result<Vec<_>, _>>().map_err(err)?;
        let mut ok = rows.len() == 19;
        let mut worst_f = 0.0f64;
        for r in &rows {
            let scaled = r.f_residual / f_scale(r.z0, r.sigma).map_err(err)?;
            worst_f = worst_f.max(scaled);
        }
        ok &= worst_f < 1e-10;
        let decreasing = rows.windows(2).all(|w| w[1].z0 < w[0].z0);
        ok &= decreasing;
        let base = fine_grid();
        let exec = self.opts.exec;
        let contrasts = exec
            .map(&sigmas, |&s| det_contrast(s, 1.0, 0.1, &base, Execution::Sequential))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let min_ratio = contrasts.iter().map(|c| c.min_ratio()).fold(f64::INFINITY, f64::min);
        ok &= min_ratio >= 10.0;
        let secs = start.elapsed().as_secs_f64();
        ok &= secs < 300.0;
        Ok((
            ok,
            format!(
                "19 roots, max scaled |F| {worst_f:.1e}, decreasing {decreasing}, min det contrast {min_ratio:.2e} (>= 10)"
            ),
            json!({"rows": rows, "contrasts": contrasts}),
        ))
    }

    fn third_derivative(&self) -> Checked {
        let s = self.setup()?;
        let third = &s.data.third;
        let phi_version = third_identity(&s.profile, &s.phi, s.xi());
        let phi_gap = (phi_version - third.value).abs() / third.value.abs();
        let ok = third.rel_gap < 0.02 && phi_gap < 0.05;
        Ok((
            ok,
            format!(
                "d3 {:.8} vs identity {:.8} (gap {:.1e} < 2%), phi version gap {phi_gap:.1e} (< 5%)",
                third.value, third.identity, third.rel_gap
            ),
            json!({"d3": third.value, "identity": third.identity, "rel_gap": third.rel_gap,
                   "phi_version": phi_version, "phi_gap": phi_gap}),
        ))
    }

    fn cubic_landscape(&self) -> Checked {
        let s = self.setup()?;
        let mut lambdas: Vec<f64> = (0..9).map(|j| 0.02 + 0.01 * j as f64).collect();
        lambdas.extend(lambdas.clone().iter().map(|l| -l));
        let report = action_expansion_probe(&s.profile, &s.phi, s.xi(), &lambdas, None, 1.0).map_err(err)?;
        let gap = report.relative_gap(s.d3());
        Ok((
            gap < 0.05,
            format!("c3 {:.6} vs d3/6 {:.6} (gap {gap:.1e} < 5%)", report.c3, s.d3() / 6.0),
            json!({"c3": report.c3, "d3_over_6": s.d3() / 6.0, "gap": gap, "coefficients": report.coefficients}),
        ))
    }

    fn coercivity(&self) -> Checked {
        let s = self.setup()?;
        let kappa = s.kappa();
        let prof = &s.coarse_profile;
        let phi = &s.coarse_phi;
        let iq = prof.gen_rotation();
        let qx = prof.gen_translation();
        let bq = apply_b(&prof.q, s.xi());
        let mut r = rng(self.opts.seed);
        let mut violations = 0usize;
        let mut worst_margin = f64::INFINITY;
        for k in 0..1000 {
            let mut f = random_packets(prof.grid, &mut r, 1 + k % 4);
            // a fifth of the samples sit near the minimizing direction
            if k % 5 == 0 {
                if let Some(m) = &s.coercivity.minimizer {
                    f = m.axpy(0.1, &f);
                }
            }
            let eps = project_out(&f, &[&iq, &qx, phi]);
            let norm = h1_inner(&eps, &eps);
            let lhs = action_hessian_form(&prof.q, &eps, &eps, &prof.params);
            let b = eps.inner(&bq);
            let rhs = kappa * norm - b * b / kappa;
            let margin = (lhs - rhs) / norm;
            worst_margin = worst_margin.min(margin);
            if margin < -1e-12 {
                violations += 1;
            }
        }
        let ok = kappa > 0.0 && violations == 0;
        Ok((
            ok,
            format!("kappa {kappa:.5} (N = {}), {violations} violations in 1000 samples", prof.grid.count()),
            json!({"kappa": kappa, "kappa_orth": s.coercivity.kappa_orth, "kappa_tp2": s.coercivity.kappa_tp2,
                   "min_three_constraints": s.coercivity.min_three_constraints, "violations": violations,
                   "worst_margin": worst_margin}),
        ))
    }

    fn round_trip(&self) -> Checked {
        use rand::Rng;
        let s = self.setup()?;
        let grid = GridSpec::new(60.0, 1024).map_err(err)?;
        let (prof, phi) = direction(&s.data.params(), &grid, s.xi())?;
        let dec = Decomposer::new(&prof, &phi, s.xi(), DecomposeOptions::default());
        let iq = prof.gen_rotation();
        let qx = prof.gen_translation();
        let mut r = rng(self.opts.seed.wrapping_add(1));
        let mut failures = 0usize;
        let (mut ey, mut eg, mut el) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..100 {
            let y0 = r.gen_range(-5.0..5.0);
            let g0 = r.gen_range(-3.0..3.0);
            let l0 = r.gen_range(-0.05..0.05);
            let eps = if k % 2 == 0 {
                let f = random_packets(grid, &mut r, 3);
                Some(project_out(&f, &[&qx, &iq, &phi]).scale(1e-3))
            } else {
                None
            };
            let u = compose(&prof, &phi, s.xi(), y0, g0, l0, eps.as_ref());
            match dec.decompose(&u, None) {
                Ok(st) => {
                    let dy = wrap_translation(st.y - y0, &grid).abs();
                    let dg = wrap_phase(st.gamma - g0).abs();
                    let dl = (st.lambda - l0).abs();
                    ey = ey.max(dy);
                    eg = eg.max(dg);
                    el = el.max(dl);
                    if !(dy < 1e-10 && dg < 1e-10 && dl < 1e-8) {
                        failures += 1;
                    }
                }
                Err(_) => failures += 1,
            }
        }
        Ok((
            failures == 0,
            format!("{failures} failures in 100 trials; max errors y {ey:.1e}, gamma {eg:.1e}, lambda {el:.1e}"),
            json!({"failures": failures, "max_dy": ey, "max_dgamma": eg, "max_dlambda": el}),
        ))
    }

    fn trilinear(&self) -> Checked {
        let s = self.setup()?;
        let grid = GridSpec::new(60.0, 1024).map_err(err)?;
        let prof = build_profile(&s.data.params(), &grid).map_err(err)?;
        let params = prof.params;
        let mut r = rng(self.opts.seed.wrapping_add(2));
        let mut worst_sym = 0.0f64;
        let mut ratios = Vec::new();
        for _ in 0..20 {
            // directions overlapping the soliton core
            let f = random_packets_within(grid, &mut r, 2, 3.0);
            let h = random_packets_within(grid, &mut r, 2, 3.0);
            let g = random_packets_within(grid, &mut r, 2, 3.0);
            let vals = [
                action_third_form_at_q(&prof, &f, &h, &g),
                action_third_form_at_q(&prof, &f, &g, &h),
                action_third_form_at_q(&prof, &h, &f, &g),
                action_third_form_at_q(&prof, &h, &g, &f),
                action_third_form_at_q(&prof, &g, &f, &h),
                action_third_form_at_q(&prof, &g, &h, &f),
            ];
            let scale = vals.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let spread = vals.iter().map(|v| (v - vals[0]).abs()).fold(0.0, f64::max);
            worst_sym = worst_sym.max(spread / scale);

            let exact = action_third_form_at_q(&prof, &f, &f, &f);
            let along = |t: f64| action(&prof.q.axpy(t, &f), &params);
            let e1 = (third_difference(along, 0.04) - exact).abs();
            let e2 = (third_difference(along, 0.02) - exact).abs();
            ratios.push(e1 / e2);
        }
        let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
        let ok = worst_sym < 1e-10 && min_ratio > 3.0 && max_ratio < 5.0;
        Ok((
            ok,
            format!(
                "permutation spread {worst_sym:.1e} (< 1e-10), step-halving error ratios in [{min_ratio:.2}, {max_ratio:.2}]"
            ),
            json!({"symmetry": worst_sym, "halving_ratios": ratios}),
        ))
    }

    fn virial_identities(&self) -> Checked {
        let c = self.setup()?.coeffs;
        let ok = c.system_residual < 1e-12 && c.identity_residual < 1e-10;
        Ok((
            ok,
            format!(
                "alpha {:.6}, beta {:.6}; system residual {:.1e}, identity residual {:.1e}",
                c.alpha, c.beta, c.system_residual, c.identity_residual
            ),
            serde_json::to_value(c).map_err(err)?,
        ))
    }

    fn instability(&self) -> Checked {
        let start = Instant::now();
        let s = self.setup()?;
        let report = run_instability_with(s, &self.opts.instability).map_err(err)?;
        let v = &report.verdict;
        let secs = start.elapsed().as_secs_f64();
        let ok = v.passed() && secs < 1800.0;
        let range = v.idot_ratio_range.map_or("none".to_string(), |r| format!("[{:.3}, {:.3}]", r[0], r[1]));
        Ok((
            ok,
            format!(
                "t0 {}, min lambda/lambda0 {:.3}, eet ratio {:.3}, Idot<0 {}, ratio range {range}, control {}",
                v.t0.map_or("none".into(), |t| format!("{t:.2}")),
                v.lambda_min_ratio,
                v.eet_max_ratio,
                v.idot_negative,
                v.control_max_ratio.map_or("skipped".into(), |r| format!("{r:.2}x")),
            ),
            json!({"verdict": v, "d3": report.d3, "kappa": report.kappa,
                   "negative_t0": report.negative.as_ref().and_then(|b| b.t0)}),
        ))
    }
}
