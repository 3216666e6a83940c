//! Time integration of gDNLS, the perturbed initial data, modulation tracking
//! along a trajectory, the radiation equation residual, the Virial quantity and
//! orbital distance.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functionals::{
    apply_b, energy, linearized_apply_with, mass, momentum, nonlinearity, nonlinearity_first_variation,
    nonlinearity_second_variation,
};
use crate::grid::{fft_forward, fft_inverse, fourier_shift, h1_norm, spectral_derivative, ComplexField, GridSpec};
use crate::degeneracy::{degeneracy_data, DegeneracyData, DegeneracyError};
use crate::modulation::{
    align_to_orbit, coercivity_estimate, renormalize_tangent, rho_tilde, CoercivityEstimate, DecomposeOptions, Decomposer,
    ModulationError, ModulationState,
};
use crate::par::Execution;
use crate::soliton::{build_profile, tangent_vector, SolitonError, SolitonParams, SolitonProfile};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("non-finite field at t = {0}")]
    NonFinite(f64),
    #[error("conservation blow-up at t = {t}: relative mass drift {drift:e}")]
    Conservation { t: f64, drift: f64 },
    #[error("time step fell below {0:e} under the CFL guard")]
    StepUnderflow(f64),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Degeneracy(#[from] DegeneracyError),
    #[error(transparent)]
    Soliton(#[from] SolitonError),
}

/// Exponential integrators for the stiff dispersive part `i u_xx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Integrating-factor (Lawson) RK4.
    IfRk4,
    /// Exponential time differencing RK4 (Cox-Matthews).
    #[default]
    Etdrk4,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub params: SolitonParams,
    pub dt: f64,
    pub t_final: f64,
    /// Fraction of the spectrum kept on `u_x` (2/3 rule by default).
    pub dealias: f64,
    /// Relative mass drift at which the run halts.
    pub mass_halt: f64,
    /// Relative mass drift at which the run is considered blown up.
    pub mass_blowup: f64,
    pub lambda0: f64,
    /// Diagnostics are sampled every `stride` steps.
    pub stride: usize,
    pub tube_radius: Option<f64>,
    #[serde(default)]
    pub scheme: Scheme,
}

impl SimConfig {
    pub fn new(grid: GridSpec, params: SolitonParams, dt: f64, t_final: f64) -> Self {
        Self {
            grid,
            params,
            dt,
            t_final,
            dealias: 2.0 / 3.0,
            mass_halt: 1e-6,
            mass_blowup: 1e-2,
            lambda0: 0.0,
            stride: 100,
            tube_radius: None,
            scheme: Scheme::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::Config(m.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.t_final >= self.dt) {
            return bad("t_final must be at least dt");
        }
        if !(self.lambda0 >= 0.0) {
            return bad("lambda0 must be non-negative");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if !(self.dealias > 0.0 && self.dealias <= 1.0) {
            return bad("dealias fraction must lie in (0, 1]");
        }
        if !(self.mass_halt > 0.0 && self.mass_blowup >= self.mass_halt) {
            return bad("mass tolerances must be positive with blowup >= halt");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Pseudospectral exponential RK4 for `u_t = i u_xx − |u|^{2σ} u_x`.
struct Stepper {
    sigma: f64,
    dx: f64,
    dt: f64,
    k2: Vec<f64>,
    deriv: Vec<Complex64>,
    half: Vec<Complex64>,
    full: Vec<Complex64>,
    buf: Vec<Complex64>,
    bufx: Vec<Complex64>,
    peak: f64,
    scheme: Scheme,
    etd: Vec<EtdCoeffs>,
    mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
struct EtdCoeffs {
    q: Complex64,
    f1: Complex64,
    f2: Complex64,
    f3: Complex64,
}

const CONTOUR_POINTS: usize = 64;

/// ETDRK4 weights for the mode `z = hL`, by contour averaging around `z`.
fn etd_coefficients(z: Complex64, h: f64) -> EtdCoeffs {
    let mut c = EtdCoeffs::default();
    for j in 0..CONTOUR_POINTS {
        let r = z + Complex64::from_polar(1.0, std::f64::consts::PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64 * 2.0);
        let er = r.exp();
        let r3 = r * r * r;
        c.q += ((r * 0.5).exp() - 1.0) / r;
        c.f1 += (-4.0 - r + er * (4.0 - 3.0 * r + r * r)) / r3;
        c.f2 += (2.0 + r + er * (r - 2.0)) / r3;
        c.f3 += (-4.0 - 3.0 * r - r * r + er * (4.0 - r)) / r3;
    }
    let w = h / CONTOUR_POINTS as f64;
    EtdCoeffs { q: c.q * w, f1: c.f1 * w, f2: c.f2 * w, f3: c.f3 * w }
}

impl Stepper {
    fn new(grid: &GridSpec, sigma: f64, dt: f64, dealias: f64, scheme: Scheme) -> Self {
        let n = grid.count();
        let k = grid.wavenumbers();
        let cutoff = dealias * (n / 2) as f64;
        let mask: Vec<bool> = (0..n).map(|j| (j.min(n - j) as f64) <= cutoff).collect();
        let deriv = grid
            .derivative_symbols()
            .into_iter()
            .zip(&mask)
            .map(|(s, &keep)| if keep { s } else { Complex64::new(0.0, 0.0) })
            .collect();
        let k2: Vec<f64> = k.iter().map(|v| v * v).collect();
        let mut s = Self {
            sigma,
            dx: grid.dx(),
            dt,
            k2,
            deriv,
            half: Vec::new(),
            full: Vec::new(),
            buf: vec![Complex64::new(0.0, 0.0); n],
            bufx: vec![Complex64::new(0.0, 0.0); n],
            peak: 0.0,
            scheme,
            etd: Vec::new(),
            mask,
        };
        s.set_dt(dt);
        s
    }

    fn set_dt(&mut self, dt: f64) {
        self.dt = dt;
        self.half = self.k2.iter().map(|&k2| Complex64::from_polar(1.0, -k2 * 0.5 * dt)).collect();
        self.full = self.half.iter().map(|e| e * e).collect();
        if self.scheme == Scheme::Etdrk4 {
            self.etd = self.k2.iter().map(|&k2| etd_coefficients(Complex64::new(0.0, -k2 * dt), dt)).collect();
        }
    }

    /// `FFT(−|u|^{2σ} u_x)` from the spectrum of `u`; records `max |u|^{2σ}`.
    fn nonlinear(&mut self, uh: &[Complex64], out: &mut [Complex64]) {
        self.buf.copy_from_slice(uh);
        for (b, (&u, &d)) in self.bufx.iter_mut().zip(uh.iter().zip(&self.deriv)) {
            *b = u * d;
        }
        fft_inverse(&mut self.buf);
        fft_inverse(&mut self.bufx);
        let mut peak = 0.0f64;
        for (o, (&u, &ux)) in out.iter_mut().zip(self.buf.iter().zip(&self.bufx)) {
            let m = u.norm_sqr().powf(self.sigma);
            peak = peak.max(m);
            *o = -m * ux;
        }
        self.peak = self.peak.max(peak);
        fft_forward(out);
        for (o, &keep) in out.iter_mut().zip(&self.mask) {
            if !keep {
                *o = Complex64::new(0.0, 0.0);
            }
        }
    }

    fn step(&mut self, uh: &mut [Complex64]) {
        self.peak = 0.0;
        match self.scheme {
            Scheme::IfRk4 => self.step_if(uh),
            Scheme::Etdrk4 => self.step_etd(uh),
        }
    }

    fn step_if(&mut self, uh: &mut [Complex64]) {
        let n = uh.len();
        let h = self.dt;
        let zero = Complex64::new(0.0, 0.0);
        let (mut a, mut b, mut c, mut d) = (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
        let mut tmp = vec![zero; n];
        self.nonlinear(uh, &mut a);
        a.iter_mut().for_each(|z| *z *= h);
        for j in 0..n {
            tmp[j] = self.half[j] * (uh[j] + 0.5 * a[j]);
        }
        self.nonlinear(&tmp, &mut b);
        b.iter_mut().for_each(|z| *z *= h);
        for j in 0..n {
            tmp[j] = self.half[j] * uh[j] + 0.5 * b[j];
        }
        self.nonlinear(&tmp, &mut c);
        c.iter_mut().for_each(|z| *z *= h);
        for j in 0..n {
            tmp[j] = self.full[j] * uh[j] + self.half[j] * c[j];
        }
        self.nonlinear(&tmp, &mut d);
        d.iter_mut().for_each(|z| *z *= h);
        for j in 0..n {
            uh[j] = self.full[j] * uh[j] + (self.full[j] * a[j] + 2.0 * self.half[j] * (b[j] + c[j]) + d[j]) / 6.0;
        }
    }

    fn step_etd(&mut self, uh: &mut [Complex64]) {
        let n = uh.len();
        let zero = Complex64::new(0.0, 0.0);
        let (mut nu, mut na, mut nb, mut nc) = (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
        let mut a = vec![zero; n];
        let mut tmp = vec![zero; n];
        self.nonlinear(uh, &mut nu);
        for j in 0..n {
            a[j] = self.half[j] * uh[j] + self.etd[j].q * nu[j];
        }
        self.nonlinear(&a, &mut na);
        for j in 0..n {
            tmp[j] = self.half[j] * uh[j] + self.etd[j].q * na[j];
        }
        self.nonlinear(&tmp, &mut nb);
        for j in 0..n {
            tmp[j] = self.half[j] * a[j] + self.etd[j].q * (2.0 * nb[j] - nu[j]);
        }
        self.nonlinear(&tmp, &mut nc);
        for j in 0..n {
            let e = &self.etd[j];
            uh[j] = self.full[j] * uh[j] + e.f1 * nu[j] + 2.0 * e.f2 * (na[j] + nb[j]) + e.f3 * nc[j];
        }
    }

    fn cfl_limit(&self) -> f64 {
        0.5 * self.dx / self.peak.max(1.0)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConservedSample {
    pub t: f64,
    pub mass: f64,
    pub momentum: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub conserved: Vec<ConservedSample>,
    #[serde(skip)]
    pub snapshots: Vec<(f64, ComplexField)>,
    pub dt_used: f64,
    pub halted: Option<String>,
    pub stopped_by_observer: bool,
    pub notes: Vec<String>,
    pub final_time: f64,
}

impl TrajectoryRecord {
    pub fn mass_drift(&self) -> f64 {
        drift(&self.conserved, |s| s.mass, true)
    }

    pub fn energy_drift(&self) -> f64 {
        drift(&self.conserved, |s| s.energy, true)
    }

    pub fn momentum_drift(&self) -> f64 {
        drift(&self.conserved, |s| s.momentum, false)
    }
}

fn drift(series: &[ConservedSample], f: impl Fn(&ConservedSample) -> f64, relative: bool) -> f64 {
    let Some(first) = series.first() else { return 0.0 };
    let v0 = f(first);
    let worst = series.iter().map(|s| (f(s) - v0).abs()).fold(0.0, f64::max);
    if relative {
        worst / v0.abs().max(f64::MIN_POSITIVE)
    } else {
        worst
    }
}

/// Receives `(t, u(t))` at every diagnostic sample; returning `false` stops the run.
pub type Observer<'a> = dyn FnMut(f64, &ComplexField) -> bool + 'a;

/// Evolves `u0` to `t_final`, sampling conserved quantities every stride.
pub fn evolve(config: &SimConfig, u0: &ComplexField) -> Result<TrajectoryRecord, DynamicsError> {
    evolve_observed(config, u0, None, &mut |_, _| true)
}

/// As [`evolve`], storing every `snapshot_every`-th sampled field and handing
/// each sample to `observer`.
pub fn evolve_observed(
    config: &SimConfig,
    u0: &ComplexField,
    snapshot_every: Option<usize>,
    observer: &mut Observer<'_>,
) -> Result<TrajectoryRecord, DynamicsError> {
    config.validate()?;
    if u0.grid() != &config.grid {
        return Err(DynamicsError::Config("initial field is not on the config grid".into()));
    }
    let sigma = config.params.sigma;
    let mut stepper = Stepper::new(&config.grid, sigma, config.dt, config.dealias, config.scheme);
    let mut substeps = 1usize;
    let mut uh = u0.spectrum();
    let mut record = TrajectoryRecord { dt_used: config.dt, ..Default::default() };
    let steps = config.steps();
    let mut m0 = 0.0;

    let mut sample = |step: usize, uh: &[Complex64], record: &mut TrajectoryRecord| -> Result<bool, DynamicsError> {
        let t = step as f64 * config.dt;
        let u = ComplexField::from_spectrum(config.grid, uh.to_vec());
        if !u.is_finite() {
            return Err(DynamicsError::NonFinite(t));
        }
        let s = ConservedSample { t, mass: mass(&u), momentum: momentum(&u), energy: energy(&u, sigma) };
        if step == 0 {
            m0 = s.mass;
        }
        record.conserved.push(s);
        record.final_time = t;
        if let Some(every) = snapshot_every {
            if (step / config.stride) % every.max(1) == 0 {
                record.snapshots.push((t, u.clone()));
            }
        }
        let dm = (s.mass - m0).abs() / m0.abs().max(f64::MIN_POSITIVE);
        if dm > config.mass_blowup {
            return Err(DynamicsError::Conservation { t, drift: dm });
        }
        if dm > config.mass_halt {
            record.halted = Some(format!("relative mass drift {dm:e} at t = {t}"));
            return Ok(false);
        }
        if !observer(t, &u) {
            record.stopped_by_observer = true;
            return Ok(false);
        }
        Ok(true)
    };

    if !sample(0, &uh, &mut record)? {
        return Ok(record);
    }
    for step in 1..=steps {
        let start = uh.clone();
        loop {
            let mut ok = true;
            for _ in 0..substeps {
                stepper.step(&mut uh);
                if stepper.dt > stepper.cfl_limit() {
                    ok = false;
                    break;
                }
            }
            if ok {
                break;
            }
            // redo the whole nominal step with finer sub-steps
            uh.copy_from_slice(&start);
            while stepper.dt > stepper.cfl_limit() {
                substeps *= 2;
                stepper.set_dt(config.dt / substeps as f64);
                if stepper.dt < 1e-9 {
                    return Err(DynamicsError::StepUnderflow(1e-9));
                }
            }
            record.dt_used = stepper.dt;
            record.notes.push(format!(
                "t = {:.6}: CFL guard reduced dt to {:e} (max |u|^(2 sigma) = {:.4})",
                (step - 1) as f64 * config.dt,
                stepper.dt,
                stepper.peak
            ));
        }
        if step % config.stride == 0 || step == steps {
            if !sample(step, &uh, &mut record)? {
                break;
            }
        }
    }
    Ok(record)
}

/// `u₀ = Q + λ₀ φ + ρ̃(λ₀) BQ`
pub fn build_unstable_data(
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
    lambda0: f64,
) -> Result<ComplexField, DynamicsError> {
    if lambda0 == 0.0 {
        return Ok(profile.q.clone());
    }
    let r = rho_tilde(lambda0, phi, profile, xi)?;
    Ok(profile.q.axpy(lambda0, phi).axpy(r, &apply_b(&profile.q, xi)))
}

/// `inf_{y, γ} ‖u − Q(· − y) e^{iγ}‖_{H¹}`
pub fn orbital_distance(u: &ComplexField, profile: &SolitonProfile) -> f64 {
    align_to_orbit(u, &profile.q).distance
}

/// `‖u(t) − Q(· − ct) e^{iωt}‖_{H¹}` on the periodic box.
pub fn exact_solution_error(u: &ComplexField, profile: &SolitonProfile, t: f64) -> f64 {
    let p = profile.params;
    let exact = fourier_shift(&profile.q, -p.speed * t).scale_c(Complex64::from_polar(1.0, p.omega * t));
    h1_norm(&(u - &exact))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirialCoeffs {
    pub alpha: f64,
    pub beta: f64,
    /// Relative residual of the 2×2 system.
    pub system_residual: f64,
    /// `|⟨BQ, αQ + β iQ_x⟩ + ⟨Bφ, φ⟩| / |⟨Bφ, φ⟩|`
    pub identity_residual: f64,
}

/// `(α, β)` with `[[⟨Q,Q⟩, ⟨iQ_x,Q⟩], [⟨iQ_x,Q⟩, ⟨iQ_x,iQ_x⟩]] (α, β) = −(⟨φ,φ⟩, ⟨iφ_x,φ⟩)`.
pub fn virial_coefficients(
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
) -> Result<VirialCoeffs, DynamicsError> {
    let q = &profile.q;
    let iqx = profile.qx.times_i();
    let m = nalgebra::Matrix2::new(q.inner(q), iqx.inner(q), iqx.inner(q), iqx.inner(&iqx));
    let iphix = spectral_derivative(phi).times_i();
    let rhs = -nalgebra::Vector2::new(phi.inner(phi), iphix.inner(phi));
    let sol = m.lu().solve(&rhs).ok_or(ModulationError::Singular("Virial"))?;
    let (alpha, beta) = (sol[0], sol[1]);
    let system_residual = (m * sol - rhs).amax() / rhs.amax().max(m.amax() * sol.amax()).max(f64::MIN_POSITIVE);
    let bphi = apply_b(phi, xi).inner(phi);
    let lhs = apply_b(q, xi).inner(&q.scale(alpha).axpy(beta, &iqx));
    let identity_residual = if bphi == 0.0 { lhs.abs() } else { (lhs + bphi).abs() / bphi.abs() };
    Ok(VirialCoeffs { alpha, beta, system_residual, identity_residual })
}

/// `Φ = φ + αλQ + βλ iQ_x`
pub fn virial_direction(profile: &SolitonProfile, phi: &ComplexField, coeffs: &VirialCoeffs, lambda: f64) -> ComplexField {
    phi.axpy(coeffs.alpha * lambda, &profile.q).axpy(coeffs.beta * lambda, &profile.qx.times_i())
}

/// `I = ⟨iε, Φ⟩`
pub fn virial_value(eps: &ComplexField, profile: &SolitonProfile, phi: &ComplexField, coeffs: &VirialCoeffs, lambda: f64) -> f64 {
    eps.times_i().inner(&virial_direction(profile, phi, coeffs, lambda))
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ModulationSample {
    pub t: f64,
    pub y: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eps_h1: f64,
    pub eps_bq: f64,
    pub virial: f64,
    pub distance: f64,
    pub mass: f64,
    pub momentum: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualSample {
    /// Midpoint of the pair.
    pub t: f64,
    pub relative: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModulationSeries {
    pub samples: Vec<ModulationSample>,
    /// First time the decomposition failed or left the tube.
    pub exit_time: Option<f64>,
    pub exit_reason: Option<String>,
    /// Radiation-equation residuals of sample pairs.
    pub eps_residuals: Vec<ResidualSample>,
}

/// Sequential decomposition along a trajectory, each solve seeded by the
/// previous state advanced with the soliton's own motion.
pub struct Tracker {
    decomposer: Decomposer,
    coeffs: VirialCoeffs,
    prev: Option<(f64, ModulationState)>,
    pub series: ModulationSeries,
    residuals: bool,
}

impl Tracker {
    pub fn new(decomposer: Decomposer, coeffs: VirialCoeffs, residuals: bool) -> Self {
        Self { decomposer, coeffs, prev: None, series: ModulationSeries::default(), residuals }
    }

    pub fn decomposer(&self) -> &Decomposer {
        &self.decomposer
    }

    fn seed_from_prev(&self, t: f64) -> Option<[f64; 3]> {
        let p = self.decomposer.profile().params;
        self.prev.as_ref().map(|(t0, s)| {
            let dt = t - t0;
            [s.y + p.speed * dt, s.gamma - p.omega * dt, s.lambda]
        })
    }

    /// Processes one sample; returns `false` once the tube has been left.
    pub fn observe(&mut self, t: f64, u: &ComplexField) -> bool {
        if self.series.exit_time.is_some() {
            return false;
        }
        let state = match self.decomposer.decompose_raw(u, self.seed_from_prev(t)) {
            Ok(s) => s,
            Err(e) => {
                self.series.exit_time = Some(t);
                self.series.exit_reason = Some(e.to_string());
                return false;
            }
        };
        let prof = self.decomposer.profile();
        let phi = self.decomposer.phi();
        let sigma = prof.params.sigma;
        let sample = ModulationSample {
            t,
            y: state.y,
            gamma: state.gamma,
            lambda: state.lambda,
            eps_h1: state.eps_h1,
            eps_bq: state.eps_bq,
            virial: virial_value(state.eps(), prof, phi, &self.coeffs, state.lambda),
            distance: orbital_distance(u, prof),
            mass: mass(u),
            momentum: momentum(u),
            energy: energy(u, sigma),
        };
        if self.residuals {
            if let Some((t0, s0)) = &self.prev {
                let r = eps_equation_residual(s0, &state, t - t0, prof, phi, self.decomposer.xi());
                self.series.eps_residuals.push(ResidualSample { t: 0.5 * (t + t0), relative: r.relative, total: r.total });
            }
        }
        self.series.samples.push(sample);
        self.prev = Some((t, state));
        true
    }

    /// Decomposes a field shortly after the last sample and records the
    /// radiation-equation residual of the pair. The sample series is unchanged.
    pub fn observe_partner(&mut self, t: f64, u: &ComplexField) -> Option<EpsResidual> {
        let seed = self.seed_from_prev(t);
        let (t0, s0) = self.prev.as_ref()?;
        let state = self.decomposer.decompose_raw(u, seed).ok()?;
        let r = eps_equation_residual(s0, &state, t - t0, self.decomposer.profile(), self.decomposer.phi(), self.decomposer.xi());
        self.series.eps_residuals.push(ResidualSample { t: 0.5 * (t + t0), relative: r.relative, total: r.total });
        Some(r)
    }
}

/// Tracks `(y, γ, λ, ε)` along the stored snapshots of a trajectory.
pub fn track_modulation(
    snapshots: &[(f64, ComplexField)],
    decomposer: Decomposer,
    coeffs: VirialCoeffs,
) -> ModulationSeries {
    let mut tracker = Tracker::new(decomposer, coeffs, true);
    for (t, u) in snapshots {
        if !tracker.observe(*t, u) {
            break;
        }
    }
    tracker.series
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpsResidual {
    /// ‖total‖ / max ‖term‖
    pub relative: f64,
    pub total: f64,
    pub largest_term: f64,
}

struct EpsTerms {
    l_eta: ComplexField,
    forcing_dir: ComplexField,
    qeta_x: ComplexField,
    qeta: ComplexField,
    r2: ComplexField,
    rt: ComplexField,
}

fn eps_terms(
    state: &ModulationState,
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
) -> EpsTerms {
    let params = profile.params;
    let bq = apply_b(&profile.q, xi);
    let coef = crate::modulation::rho_coefficient(phi, profile, xi);
    let lambda = state.lambda;
    let eta = phi.scale(lambda).axpy(coef * lambda * lambda, &bq).axpy(1.0, state.eps());
    let l_eta = linearized_apply_with(&profile.q, &profile.qx, &eta, &params);
    let qeta = &profile.q + &eta;
    let qeta_x = spectral_derivative(&qeta);
    let r1 = nonlinearity_first_variation(&profile.q, &profile.qx, &eta, params.sigma);
    let r2 = nonlinearity_second_variation(&profile.q, &profile.qx, &eta, &eta, params.sigma).scale(0.5);
    let fq = nonlinearity(&profile.q, params.sigma);
    let fqe = nonlinearity(&qeta, params.sigma);
    let rt = &(&(&fqe - &fq) - &r1) - &r2;
    EpsTerms { l_eta, forcing_dir: phi.axpy(2.0 * coef * lambda, &bq), qeta_x, qeta, r2, rt }
}

/// Residual of `iε_t − Lη = −iλ_t(φ + ρ'BQ) + i(y_t − c)(Q+η)_x − (γ_t + ω)(Q+η) − R₂ − R̃`
/// with time derivatives from the two states and the remaining terms averaged.
pub fn eps_equation_residual(
    s0: &ModulationState,
    s1: &ModulationState,
    dt: f64,
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
) -> EpsResidual {
    let p = profile.params;
    let lt = (s1.lambda - s0.lambda) / dt;
    let yt = (s1.y - s0.y) / dt - p.speed;
    let gt = (s1.gamma - s0.gamma) / dt + p.omega;
    let eps_t = (s1.eps() - s0.eps()).scale(1.0 / dt);
    let a = eps_terms(s0, profile, phi, xi);
    let b = eps_terms(s1, profile, phi, xi);
    let avg = |f: &dyn Fn(&EpsTerms) -> ComplexField| (&f(&a) + &f(&b)).scale(0.5);
    let terms = [
        eps_t.times_i(),
        -&avg(&|e| e.l_eta.clone()),
        avg(&|e| e.forcing_dir.clone()).times_i().scale(lt),
        -&avg(&|e| e.qeta_x.clone()).times_i().scale(yt),
        avg(&|e| e.qeta.clone()).scale(gt),
        avg(&|e| e.r2.clone()),
        avg(&|e| e.rt.clone()),
    ];
    let total = terms.iter().skip(1).fold(terms[0].clone(), |acc, t| &acc + t);
    let largest = terms.iter().map(|t| t.l2_norm()).fold(0.0, f64::max);
    let tn = total.l2_norm();
    EpsResidual { relative: if largest > 0.0 { tn / largest } else { 0.0 }, total: tn, largest_term: largest }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateSample {
    pub t: f64,
    pub lambda_dot: f64,
    pub y_dot_minus_c: f64,
    pub gamma_dot_plus_omega: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub rates: Vec<RateSample>,
    /// `max (|λ̇| + |ẏ − c| + |γ̇ + ω|) / (|λ| + ‖ε‖_{H¹})`
    pub constant: f64,
}

/// Centered differences of the modulation parameters.
pub fn parameter_rates(samples: &[ModulationSample], params: &SolitonParams) -> RateReport {
    let mut rates = Vec::new();
    let mut constant = 0.0f64;
    for w in samples.windows(3) {
        let h = w[2].t - w[0].t;
        let r = RateSample {
            t: w[1].t,
            lambda_dot: (w[2].lambda - w[0].lambda) / h,
            y_dot_minus_c: (w[2].y - w[0].y) / h - params.speed,
            gamma_dot_plus_omega: (w[2].gamma - w[0].gamma) / h + params.omega,
        };
        let size = w[1].lambda.abs() + w[1].eps_h1;
        if size > 0.0 {
            constant = constant.max((r.lambda_dot.abs() + r.y_dot_minus_c.abs() + r.gamma_dot_plus_omega.abs()) / size);
        }
        rates.push(r);
    }
    RateReport { rates, constant }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VirialSeries {
    pub t: Vec<f64>,
    pub i: Vec<f64>,
    pub i_dot: Vec<f64>,
    /// `İ / (½ d''' λ²)` at each interior sample.
    pub ratio: Vec<f64>,
}

/// `I(t)` from the tracked samples and `İ` by centered differences.
pub fn virial_series(samples: &[ModulationSample], d3: f64) -> VirialSeries {
    let n = samples.len();
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let i: Vec<f64> = samples.iter().map(|s| s.virial).collect();
    let mut i_dot = vec![f64::NAN; n];
    let mut ratio = vec![f64::NAN; n];
    for j in 1..n.saturating_sub(1) {
        i_dot[j] = (i[j + 1] - i[j - 1]) / (t[j + 1] - t[j - 1]);
        let pred = 0.5 * d3 * samples[j].lambda * samples[j].lambda;
        ratio[j] = i_dot[j] / pred;
    }
    VirialSeries { t, i, i_dot, ratio }
}

/// Everything the instability experiment needs at a degenerate point.
#[derive(Debug, Clone)]
pub struct DegenerateSetup {
    pub data: DegeneracyData,
    pub profile: SolitonProfile,
    pub phi: ComplexField,
    pub coeffs: VirialCoeffs,
    pub coercivity: CoercivityEstimate,
    /// Profile and direction on the grid used for the coercivity estimate.
    pub coarse_profile: SolitonProfile,
    pub coarse_phi: ComplexField,
}

impl DegenerateSetup {
    pub fn d3(&self) -> f64 {
        self.data.d3
    }

    pub fn xi(&self) -> [f64; 2] {
        self.data.xi
    }

    pub fn kappa(&self) -> f64 {
        self.coercivity.kappa
    }
}

/// Degeneracy data, renormalized direction and Virial coefficients on `grid`;
/// the coercivity constant is estimated on the coarser `coercivity_grid`.
pub fn prepare_degenerate(
    sigma: f64,
    omega: f64,
    grid: &GridSpec,
    coercivity_grid: &GridSpec,
    exec: Execution,
) -> Result<DegenerateSetup, DynamicsError> {
    let data = degeneracy_data(sigma, omega, grid, exec)?;
    let params = data.params();
    let renorm = |g: &GridSpec| -> Result<(SolitonProfile, ComplexField), DynamicsError> {
        let prof = build_profile(&params, g)?;
        let tilde = tangent_vector(&prof, data.xi, None)?;
        let phi = renormalize_tangent(&prof, &tilde, data.xi)?.phi;
        Ok((prof, phi))
    };
    let (profile, phi) = renorm(grid)?;
    let (coarse_profile, coarse_phi) = renorm(coercivity_grid)?;
    let coercivity = coercivity_estimate(&coarse_profile, &coarse_phi, data.xi)?;
    let coeffs = virial_coefficients(&profile, &phi, data.xi)?;
    Ok(DegenerateSetup { data, profile, phi, coeffs, coercivity, coarse_profile, coarse_phi })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstabilityConfig {
    pub sigma: f64,
    pub omega: f64,
    pub length: f64,
    pub count: usize,
    pub coercivity_length: f64,
    pub coercivity_count: usize,
    pub dt: f64,
    pub t_max: f64,
    pub lambda0: f64,
    pub scheme: Scheme,
    /// Time between tracked samples.
    pub sample_interval: f64,
    /// Steps between a sample and its partner for the radiation-equation residual.
    pub pair_steps: usize,
    /// Virial comparison starts after this time.
    pub transient: f64,
    /// `α₀ = alpha_factor · max(d(0), distance_floor)`
    pub alpha_factor: f64,
    pub control_factor: f64,
    /// Distances below this are treated as discretization error.
    pub distance_floor: f64,
    pub eet_margin: f64,
    pub ratio_window: [f64; 2],
    /// Lower bound on `λ(t) / λ₀`.
    pub lambda_floor: f64,
    pub run_control: bool,
    pub run_negative: bool,
    /// Control horizon; defaults to the final time of the perturbed run.
    pub control_horizon: Option<f64>,
    /// Horizon of the `−λ₀` run; defaults to `t_max`.
    pub negative_horizon: Option<f64>,
    pub mass_halt: f64,
    /// Times at which the perturbed field is kept for output.
    pub snapshot_times: Vec<f64>,
}

impl Default for InstabilityConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            omega: 1.0,
            length: 80.0,
            count: 2048,
            coercivity_length: 60.0,
            coercivity_count: 512,
            dt: 1e-3,
            t_max: 60.0,
            lambda0: 0.05,
            scheme: Scheme::default(),
            sample_interval: 0.1,
            pair_steps: 2,
            transient: 1.0,
            alpha_factor: 10.0,
            control_factor: 2.0,
            distance_floor: 1e-6,
            eet_margin: 0.5,
            ratio_window: [0.5, 1.5],
            lambda_floor: 0.5,
            run_control: true,
            run_negative: true,
            control_horizon: None,
            negative_horizon: None,
            mass_halt: 1e-6,
            snapshot_times: Vec::new(),
        }
    }
}

impl InstabilityConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::Config(m.into()));
        let positive = [
            self.length,
            self.coercivity_length,
            self.dt,
            self.t_max,
            self.sample_interval,
            self.transient,
            self.alpha_factor,
            self.control_factor,
            self.distance_floor,
            self.eet_margin,
            self.lambda_floor,
            self.mass_halt,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("lengths, times, factors and tolerances must be positive");
        }
        if !self.lambda0.is_finite() {
            return bad("lambda0 must be finite");
        }
        if self.snapshot_times.iter().any(|t| !(*t >= 0.0 && *t <= self.t_max)) {
            return bad("snapshot_times must lie in [0, t_max]");
        }
        if self.pair_steps == 0 {
            return bad("pair_steps must be positive");
        }
        if self.sample_interval < 2.0 * self.pair_steps as f64 * self.dt {
            return bad("sample_interval must cover at least two residual pairs");
        }
        if !(self.ratio_window[0] < self.ratio_window[1]) {
            return bad("ratio_window must be increasing");
        }
        if self.t_max > 200.0 {
            return bad("t_max must not exceed 200");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec, DynamicsError> {
        GridSpec::new(self.length, self.count).map_err(|e| DynamicsError::Config(e.to_string()))
    }

    pub fn coercivity_grid(&self) -> Result<GridSpec, DynamicsError> {
        GridSpec::new(self.coercivity_length, self.coercivity_count).map_err(|e| DynamicsError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchReport {
    pub lambda0: f64,
    pub initial_distance: f64,
    pub alpha0: f64,
    /// First sampled time with distance above `α₀`.
    pub t0: Option<f64>,
    pub tube_exit: Option<f64>,
    pub tube_exit_reason: Option<String>,
    pub final_time: f64,
    pub max_distance: f64,
    /// Largest relative radiation-equation residual over the sample pairs.
    pub max_eps_residual: f64,
    pub max_eps_residual_abs: f64,
    pub mass_drift: f64,
    pub energy_drift: f64,
    pub momentum_drift: f64,
    pub halted: Option<String>,
    pub notes: Vec<String>,
    pub rate_constant: f64,
    pub series: ModulationSeries,
    pub virial: VirialSeries,
    #[serde(skip)]
    pub snapshots: Vec<(f64, ComplexField)>,
}

impl BranchReport {
    /// Samples taken before `t₀` (all samples if the threshold was never crossed).
    pub fn window(&self) -> impl Iterator<Item = (usize, &ModulationSample)> {
        let end = self.t0.unwrap_or(f64::INFINITY);
        self.series.samples.iter().enumerate().filter(move |(_, s)| s.t < end)
    }
}

/// Evolves `Q + λ₀φ + ρ̃BQ` up to `horizon`, tracking the modulation parameters.
/// With `stop_at_alpha` the run ends at the first sample beyond `α₀`.
pub fn run_branch(
    setup: &DegenerateSetup,
    cfg: &InstabilityConfig,
    lambda0: f64,
    horizon: f64,
    stop_at_alpha: bool,
) -> Result<BranchReport, DynamicsError> {
    let profile = &setup.profile;
    let grid = profile.grid;
    let u0 = build_unstable_data(profile, &setup.phi, setup.xi(), lambda0)?;
    let d0 = orbital_distance(&u0, profile);
    let alpha0 = cfg.alpha_factor * d0.max(cfg.distance_floor);

    let mut sim = SimConfig::new(grid, profile.params, cfg.dt, horizon);
    sim.scheme = cfg.scheme;
    sim.stride = cfg.pair_steps;
    sim.mass_halt = cfg.mass_halt;
    let per_sample = ((cfg.sample_interval / (cfg.dt * cfg.pair_steps as f64)).round() as usize).max(2);

    let decomposer = Decomposer::new(profile, &setup.phi, setup.xi(), DecomposeOptions::default());
    let mut tracker = Tracker::new(decomposer, setup.coeffs, false);
    let mut t0 = None;
    let mut calls = 0usize;
    let mut wanted: Vec<f64> = if lambda0 == cfg.lambda0 { cfg.snapshot_times.clone() } else { Vec::new() };
    wanted.sort_by(f64::total_cmp);
    let mut snapshots = Vec::new();
    let half = 0.5 * cfg.dt * cfg.pair_steps as f64;
    let record = evolve_observed(&sim, &u0, None, &mut |t, u| {
        let k = calls;
        calls += 1;
        while snapshots.len() < wanted.len() && t >= wanted[snapshots.len()] - half {
            snapshots.push((t, u.clone()));
        }
        match k % per_sample {
            0 => {
                if !tracker.observe(t, u) {
                    return false;
                }
                let dist = tracker.series.samples.last().map_or(0.0, |s| s.distance);
                if dist > alpha0 && t0.is_none() {
                    t0 = Some(t);
                    return !stop_at_alpha;
                }
                true
            }
            1 => {
                tracker.observe_partner(t, u);
                true
            }
            _ => true,
        }
    })?;
    let series = tracker.series;
    let virial = virial_series(&series.samples, setup.d3());
    let rates = parameter_rates(&series.samples, &profile.params);
    Ok(BranchReport {
        lambda0,
        initial_distance: d0,
        alpha0,
        t0,
        tube_exit: series.exit_time,
        tube_exit_reason: series.exit_reason.clone(),
        final_time: record.final_time,
        max_distance: series.samples.iter().map(|s| s.distance).fold(0.0, f64::max),
        max_eps_residual: series.eps_residuals.iter().map(|r| r.relative).fold(0.0, f64::max),
        max_eps_residual_abs: series.eps_residuals.iter().map(|r| r.total).fold(0.0, f64::max),
        mass_drift: record.mass_drift(),
        energy_drift: record.energy_drift(),
        momentum_drift: record.momentum_drift(),
        halted: record.halted,
        notes: record.notes,
        rate_constant: rates.constant,
        series,
        virial,
        snapshots,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstabilityVerdict {
    /// `λ₀ = 0`: the run is its own control and passes if `α₀` is never crossed.
    pub control_only: bool,
    pub t0: Option<f64>,
    pub alpha0_crossed: bool,
    /// Range of `İ / (½ d₃ λ²)` beyond the transient and before `t₀`.
    #[serde(rename = "Idot_ratio_range")]
    pub idot_ratio_range: Option<[f64; 2]>,
    pub idot_ratio_ok: bool,
    pub idot_negative: bool,
    pub eet_bound_ok: bool,
    /// `max ‖ε‖² / (−(2/κ) d₃ λ³)` before `t₀`.
    pub eet_max_ratio: f64,
    pub lt_bound_ok: bool,
    pub lambda_min_ratio: f64,
    /// `I(t) − I(0) ≤ ½ · (1/16) d₃ λ₀² t` beyond the transient.
    pub virial_drop_ok: bool,
    pub control_ok: Option<bool>,
    /// Control maximum distance over its initial distance (floored).
    pub control_max_ratio: Option<f64>,
}

impl InstabilityVerdict {
    pub fn passed(&self) -> bool {
        if self.control_only {
            return !self.alpha0_crossed;
        }
        self.alpha0_crossed
            && self.idot_ratio_ok
            && self.idot_negative
            && self.eet_bound_ok
            && self.lt_bound_ok
            && self.control_ok.unwrap_or(true)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub params: SolitonParams,
    pub xi: [f64; 2],
    pub d3: f64,
    pub kappa: f64,
    pub virial_coefficients: VirialCoeffs,
    pub verdict: InstabilityVerdict,
    pub perturbed: BranchReport,
    pub control: Option<BranchReport>,
    pub negative: Option<BranchReport>,
}

/// Checks on the perturbed branch (and the control, if present).
pub fn instability_verdict(
    setup: &DegenerateSetup,
    cfg: &InstabilityConfig,
    perturbed: &BranchReport,
    control: Option<&BranchReport>,
) -> InstabilityVerdict {
    let d3 = setup.d3();
    let kappa = setup.kappa();
    let lambda0 = perturbed.lambda0;
    if lambda0 == 0.0 {
        let r = perturbed.max_distance / perturbed.initial_distance.max(cfg.distance_floor);
        return InstabilityVerdict {
            control_only: true,
            t0: perturbed.t0,
            alpha0_crossed: perturbed.t0.is_some(),
            idot_ratio_range: None,
            idot_ratio_ok: false,
            idot_negative: false,
            eet_bound_ok: false,
            eet_max_ratio: f64::NAN,
            lt_bound_ok: false,
            lambda_min_ratio: f64::NAN,
            virial_drop_ok: false,
            control_ok: None,
            control_max_ratio: Some(r),
        };
    }
    let mut lambda_min_ratio = f64::INFINITY;
    let mut eet_max_ratio = 0.0f64;
    let mut idot_negative = true;
    let mut range = [f64::INFINITY, f64::NEG_INFINITY];
    let mut drop_ok = true;
    let i0 = perturbed.series.samples.first().map_or(0.0, |s| s.virial);
    for (j, s) in perturbed.window() {
        lambda_min_ratio = lambda_min_ratio.min(s.lambda / lambda0);
        let bound = -(2.0 / kappa) * d3 * s.lambda.powi(3);
        let r = if bound > 0.0 { s.eps_h1 * s.eps_h1 / bound } else { f64::INFINITY };
        eet_max_ratio = eet_max_ratio.max(r);
        if s.t >= cfg.transient {
            let idot = perturbed.virial.i_dot[j];
            let ratio = perturbed.virial.ratio[j];
            if idot.is_finite() {
                idot_negative &= idot < 0.0;
                range = [range[0].min(ratio), range[1].max(ratio)];
            }
            drop_ok &= s.virial - i0 <= 0.5 * d3 * lambda0 * lambda0 * s.t / 16.0;
        }
    }
    let idot_ratio_range = (range[0] <= range[1]).then_some(range);
    let idot_ratio_ok = idot_ratio_range.is_some_and(|r| r[0] >= cfg.ratio_window[0] && r[1] <= cfg.ratio_window[1]);
    let (control_ok, control_max_ratio) = match control {
        Some(c) => {
            let base = c.initial_distance.max(cfg.distance_floor);
            let r = c.max_distance / base;
            (Some(r <= cfg.control_factor && c.tube_exit.is_none()), Some(r))
        }
        None => (None, None),
    };
    InstabilityVerdict {
        control_only: false,
        t0: perturbed.t0,
        alpha0_crossed: perturbed.t0.is_some_and(|t| t <= cfg.t_max),
        idot_ratio_range,
        idot_ratio_ok,
        idot_negative: idot_negative && idot_ratio_range.is_some(),
        eet_bound_ok: eet_max_ratio <= 1.0 + cfg.eet_margin,
        eet_max_ratio,
        lt_bound_ok: lambda_min_ratio >= cfg.lambda_floor,
        lambda_min_ratio,
        virial_drop_ok: drop_ok,
        control_ok,
        control_max_ratio,
    }
}

/// The full experiment: perturbed branch, `λ₀ = 0` control and `−λ₀` branch.
pub fn run_instability(cfg: &InstabilityConfig, exec: Execution) -> Result<InstabilityReport, DynamicsError> {
    cfg.validate()?;
    let setup = prepare_degenerate(cfg.sigma, cfg.omega, &cfg.grid()?, &cfg.coercivity_grid()?, exec)?;
    run_instability_with(&setup, cfg)
}

pub fn run_instability_with(setup: &DegenerateSetup, cfg: &InstabilityConfig) -> Result<InstabilityReport, DynamicsError> {
    cfg.validate()?;
    let perturbed = run_branch(setup, cfg, cfg.lambda0, cfg.t_max, true)?;
    let control = if cfg.run_control && cfg.lambda0 != 0.0 {
        let horizon = cfg.control_horizon.unwrap_or(perturbed.final_time).max(cfg.dt);
        Some(run_branch(setup, cfg, 0.0, horizon, false)?)
    } else {
        None
    };
    let negative = if cfg.run_negative && cfg.lambda0 != 0.0 {
        Some(run_branch(setup, cfg, -cfg.lambda0, cfg.negative_horizon.unwrap_or(cfg.t_max), true)?)
    } else {
        None
    };
    let verdict = instability_verdict(setup, cfg, &perturbed, control.as_ref());
    Ok(InstabilityReport {
        params: setup.profile.params,
        xi: setup.xi(),
        d3: setup.d3(),
        kappa: setup.kappa(),
        virial_coefficients: setup.coeffs,
        verdict,
        perturbed,
        control,
        negative,
    })
}
