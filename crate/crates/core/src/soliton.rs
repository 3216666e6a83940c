//! The two-parameter family of solitary waves `Q_{ω,c}` of gDNLS, their
//! parameter derivatives and the profile-equation residual.
//!
//! `Q(x) = Ψ(x) exp{i θ(x)}` with
//! `Ψ(x)^{2σ} = (σ+1)(4ω−c²) / (2√ω (cosh(σ√(4ω−c²) x) − c/(2√ω)))` and
//! `θ(x) = c x / 2 − (1/(2σ+2)) ∫_{−∞}^x Ψ^{2σ}`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{spectral_derivative, spectral_second_derivative, ComplexField, GridError, GridSpec, I};

pub const DEFAULT_TOL_BOUNDARY: f64 = 1e-10;
pub const DEFAULT_TOL_TAIL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolitonError {
    #[error("invalid soliton parameters (sigma={sigma}, omega={omega}, c={speed}): {reason}")]
    InvalidParams { sigma: f64, omega: f64, speed: f64, reason: &'static str },
    #[error("|Q(±L/2)| = {magnitude:e} exceeds {tol:e}; enlarge the box")]
    BoundaryDecay { magnitude: f64, tol: f64 },
    #[error("phase integral left tail {tail:e} exceeds {tol:e}; enlarge the box")]
    PhaseTail { tail: f64, tol: f64 },
    #[error("direction vector must be nonzero")]
    ZeroDirection,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolitonParams {
    pub sigma: f64,
    pub omega: f64,
    #[serde(rename = "c")]
    pub speed: f64,
}

impl SolitonParams {
    pub fn new(sigma: f64, omega: f64, speed: f64) -> Result<Self, SolitonError> {
        let p = Self { sigma, omega, speed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SolitonError> {
        let err = |reason| SolitonError::InvalidParams {
            sigma: self.sigma,
            omega: self.omega,
            speed: self.speed,
            reason,
        };
        if !(self.sigma.is_finite() && self.omega.is_finite() && self.speed.is_finite()) {
            return Err(err("non-finite value"));
        }
        if !(self.sigma > 1.0 && self.sigma < 2.0) {
            return Err(err("sigma must lie in (1, 2)"));
        }
        if !(self.omega > 0.0) {
            return Err(err("omega must be positive"));
        }
        if !(self.discriminant() > 0.0) {
            return Err(err("4 omega - c^2 must be positive"));
        }
        Ok(())
    }

    /// `4ω − c²`
    pub fn discriminant(&self) -> f64 {
        4.0 * self.omega - self.speed * self.speed
    }

    /// Exponential decay rate of `Ψ^{2σ}`, i.e. `σ√(4ω−c²)`.
    pub fn decay_rate(&self) -> f64 {
        self.sigma * self.discriminant().sqrt()
    }

    fn shape(&self) -> (f64, f64) {
        (self.decay_rate(), self.speed / (2.0 * self.omega.sqrt()))
    }

    fn amplitude(&self) -> f64 {
        (self.sigma + 1.0) * self.discriminant() / (2.0 * self.omega.sqrt())
    }

    pub fn with_omega(&self, omega: f64) -> Self {
        Self { omega, ..*self }
    }

    pub fn with_speed(&self, speed: f64) -> Self {
        Self { speed, ..*self }
    }
}

/// ln(cosh u − b) for |b| < 1 without overflow.
fn ln_cosh_minus(u: f64, b: f64) -> f64 {
    let au = u.abs();
    let e = (-au).exp();
    au + (0.5 * (1.0 + e * e) - b * e).ln()
}

/// `Ψ^{2σ}(x)`, the density whose running integral enters the phase.
pub fn psi_pow(params: &SolitonParams, x: f64) -> f64 {
    let (a, b) = params.shape();
    (params.amplitude().ln() - ln_cosh_minus(a * x, b)).exp()
}

/// Ψ(x); strictly positive and even.
pub fn psi_value(params: &SolitonParams, x: f64) -> Result<f64, SolitonError> {
    params.validate()?;
    Ok(psi_unchecked(params, x))
}

fn psi_unchecked(params: &SolitonParams, x: f64) -> f64 {
    let (a, b) = params.shape();
    ((params.amplitude().ln() - ln_cosh_minus(a * x, b)) / (2.0 * params.sigma)).exp()
}

/// ∫_{−∞}^x Ψ^{2σ}, in closed form.
pub fn psi_pow_cumulative(params: &SolitonParams, x: f64) -> f64 {
    let (a, b) = params.shape();
    let r = ((1.0 + b) / (1.0 - b)).sqrt();
    2.0 * (params.sigma + 1.0) / params.sigma * ((r * (0.5 * a * x).tanh()).atan() + r.atan())
}

/// Analytic upper bound on ∫_{−∞}^{−L/2} Ψ^{2σ} from the exponential decay of Ψ^{2σ}.
pub fn phase_tail_bound(params: &SolitonParams, half_length: f64) -> f64 {
    let (a, b) = params.shape();
    let u = a * half_length;
    // for u ≥ ln 4: cosh u − b ≥ e^u/2 − e^u/4
    if u < 4f64.ln() || 2.0 * b.abs() * (-u).exp() > 0.5 {
        return f64::INFINITY;
    }
    params.amplitude() * 4.0 * (-u).exp() / a
}

/// Phase θ at the grid nodes.
pub fn phase_value(params: &SolitonParams, grid: &GridSpec) -> Result<Vec<f64>, SolitonError> {
    phase_value_with(params, grid, DEFAULT_TOL_TAIL)
}

pub fn phase_value_with(params: &SolitonParams, grid: &GridSpec, tol_tail: f64) -> Result<Vec<f64>, SolitonError> {
    params.validate()?;
    let tail = phase_tail_bound(params, 0.5 * grid.length());
    if !(tail < tol_tail) {
        return Err(SolitonError::PhaseTail { tail, tol: tol_tail });
    }
    let k = 1.0 / (2.0 * params.sigma + 2.0);
    Ok(grid
        .nodes()
        .into_iter()
        .map(|x| 0.5 * params.speed * x - k * psi_pow_cumulative(params, x))
        .collect())
}

/// Smallest box (growing from `base` by factors of 5/4) on which the profile
/// clears both decay checks with a factor `slack` to spare, keeping the
/// spacing of `base`.
pub fn fitted_grid(params: &SolitonParams, base: &GridSpec, slack: f64) -> Result<GridSpec, SolitonError> {
    params.validate()?;
    let mut length = base.length();
    for _ in 0..64 {
        let half = 0.5 * length;
        if psi_unchecked(params, half) < slack * DEFAULT_TOL_BOUNDARY
            && phase_tail_bound(params, half) < slack * DEFAULT_TOL_TAIL
        {
            return Ok(GridSpec::with_max_spacing(length, base.dx())?);
        }
        length *= 1.25;
    }
    Err(SolitonError::BoundaryDecay { magnitude: psi_unchecked(params, 0.5 * length), tol: DEFAULT_TOL_BOUNDARY })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub tol_boundary: f64,
    pub tol_tail: f64,
    /// Constant added to θ (gauge rotation).
    pub phase_offset: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { tol_boundary: DEFAULT_TOL_BOUNDARY, tol_tail: DEFAULT_TOL_TAIL, phase_offset: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SolitonProfile {
    pub params: SolitonParams,
    pub grid: GridSpec,
    pub q: ComplexField,
    pub psi: Vec<f64>,
    pub qx: ComplexField,
    pub phase: Vec<f64>,
    pub boundary_magnitude: f64,
    /// `(c0, 1/c0)` bracketing `|Q'/Q|` over the grid.
    pub log_slope_bounds: (f64, f64),
}

impl SolitonProfile {
    /// Rotation generator `iQ`.
    pub fn gen_rotation(&self) -> ComplexField {
        self.q.times_i()
    }

    /// Translation generator `∂ₓQ`.
    pub fn gen_translation(&self) -> ComplexField {
        self.qx.clone()
    }

    pub fn omega(&self) -> f64 {
        self.params.omega
    }

    pub fn speed(&self) -> f64 {
        self.params.speed
    }

    pub fn sigma(&self) -> f64 {
        self.params.sigma
    }
}

/// |Q'/Q| = |Ψ'/Ψ + iθ'| from the closed forms.
fn log_slope(params: &SolitonParams, x: f64) -> f64 {
    let (a, b) = params.shape();
    let u = a * x;
    // Ψ'/Ψ = −(a/2σ)·sinh u/(cosh u − b), written to avoid overflow
    let e = (-2.0 * u.abs()).exp();
    let ratio = u.signum() * (1.0 - e) / (1.0 + e - 2.0 * b * (-u.abs()).exp());
    let dlog_psi = -a / (2.0 * params.sigma) * ratio;
    let dtheta = 0.5 * params.speed - psi_pow(params, x) / (2.0 * params.sigma + 2.0);
    dlog_psi.hypot(dtheta)
}

fn sample_q(params: &SolitonParams, grid: &GridSpec, opts: &BuildOptions) -> Result<(ComplexField, Vec<f64>, Vec<f64>), SolitonError> {
    params.validate()?;
    let boundary = psi_unchecked(params, 0.5 * grid.length());
    if !(boundary < opts.tol_boundary) {
        return Err(SolitonError::BoundaryDecay { magnitude: boundary, tol: opts.tol_boundary });
    }
    let mut phase = phase_value_with(params, grid, opts.tol_tail)?;
    phase.iter_mut().for_each(|t| *t += opts.phase_offset);
    let psi: Vec<f64> = grid.nodes().iter().map(|&x| psi_unchecked(params, x)).collect();
    let q = psi
        .iter()
        .zip(&phase)
        .map(|(&p, &t)| Complex64::from_polar(p, t))
        .collect();
    Ok((ComplexField::new(*grid, q)?, psi, phase))
}

pub fn build_profile(params: &SolitonParams, grid: &GridSpec) -> Result<SolitonProfile, SolitonError> {
    build_profile_with(params, grid, &BuildOptions::default())
}

pub fn build_profile_with(
    params: &SolitonParams,
    grid: &GridSpec,
    opts: &BuildOptions,
) -> Result<SolitonProfile, SolitonError> {
    let (q, psi, phase) = sample_q(params, grid, opts)?;
    let qx = spectral_derivative(&q);
    let (lo, hi) = grid
        .nodes()
        .iter()
        .map(|&x| log_slope(params, x))
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let c0 = lo.min(1.0 / hi).min(1.0);
    Ok(SolitonProfile {
        params: *params,
        grid: *grid,
        q,
        psi,
        qx,
        phase,
        boundary_magnitude: psi_unchecked(params, 0.5 * grid.length()),
        log_slope_bounds: (c0, 1.0 / c0),
    })
}

/// `−u_xx + ωu + c i u_x − i|u|^{2σ} u_x`, the left side of the profile equation.
pub fn profile_operator(u: &ComplexField, omega: f64, speed: f64, sigma: f64) -> ComplexField {
    let ux = spectral_derivative(u);
    let uxx = spectral_second_derivative(u);
    let out = u
        .samples()
        .iter()
        .zip(ux.samples())
        .zip(uxx.samples())
        .map(|((&v, &vx), &vxx)| {
            let m = v.norm_sqr().powf(sigma);
            -vxx + v * omega + I * vx * speed - I * vx * m
        })
        .collect();
    ComplexField::from_vec(*u.grid(), out)
}

/// ‖profile operator applied to Q‖ / ‖Q‖.
pub fn soliton_residual(profile: &SolitonProfile) -> f64 {
    soliton_residual_with(profile, profile.params.omega, profile.params.speed)
}

/// Same residual with the operator's (ω, c) overridden.
pub fn soliton_residual_with(profile: &SolitonProfile, omega: f64, speed: f64) -> f64 {
    profile_operator(&profile.q, omega, speed, profile.params.sigma).l2_norm() / profile.q.l2_norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamAxis {
    Omega,
    Speed,
}

/// Default finite-difference step `max(1e-5, 1e-4 |p|)`.
pub fn default_step(value: f64) -> f64 {
    (1e-4 * value.abs()).max(1e-5)
}

fn axis_value(params: &SolitonParams, axis: ParamAxis) -> f64 {
    match axis {
        ParamAxis::Omega => params.omega,
        ParamAxis::Speed => params.speed,
    }
}

fn displaced(params: &SolitonParams, axis: ParamAxis, delta: f64) -> SolitonParams {
    match axis {
        ParamAxis::Omega => params.with_omega(params.omega + delta),
        ParamAxis::Speed => params.with_speed(params.speed + delta),
    }
}

/// Central difference `(Q_{p+h} − Q_{p−h}) / 2h` on a common grid.
pub fn param_derivative(
    params: &SolitonParams,
    grid: &GridSpec,
    axis: ParamAxis,
    h: Option<f64>,
) -> Result<ComplexField, SolitonError> {
    let h = h.unwrap_or_else(|| default_step(axis_value(params, axis)));
    let opts = BuildOptions::default();
    let (plus, _, _) = sample_q(&displaced(params, axis, h), grid, &opts)?;
    let (minus, _, _) = sample_q(&displaced(params, axis, -h), grid, &opts)?;
    Ok((&plus - &minus).scale(0.5 / h))
}

#[derive(Debug, Clone)]
pub struct CheckedDerivative {
    pub field: ComplexField,
    pub step: f64,
    /// ‖D_h − D_{h/2}‖ / ‖D_{h/2}‖
    pub halving_gap: f64,
}

/// Central difference at `h` together with the step-halving discrepancy.
pub fn param_derivative_checked(
    params: &SolitonParams,
    grid: &GridSpec,
    axis: ParamAxis,
    h: Option<f64>,
) -> Result<CheckedDerivative, SolitonError> {
    let h = h.unwrap_or_else(|| default_step(axis_value(params, axis)));
    let full = param_derivative(params, grid, axis, Some(h))?;
    let half = param_derivative(params, grid, axis, Some(0.5 * h))?;
    let halving_gap = (&full - &half).l2_norm() / half.l2_norm().max(f64::MIN_POSITIVE);
    Ok(CheckedDerivative { field: full, step: h, halving_gap })
}

/// `φ̃ = ξ₁ ∂_ω Q + ξ₂ ∂_c Q`.
pub fn tangent_vector(profile: &SolitonProfile, xi: [f64; 2], h: Option<f64>) -> Result<ComplexField, SolitonError> {
    if xi[0] == 0.0 && xi[1] == 0.0 {
        return Err(SolitonError::ZeroDirection);
    }
    let mut out = ComplexField::zeros(profile.grid);
    if xi[0] != 0.0 {
        let d = param_derivative(&profile.params, &profile.grid, ParamAxis::Omega, h)?;
        out = out.axpy(xi[0], &d);
    }
    if xi[1] != 0.0 {
        let d = param_derivative(&profile.params, &profile.grid, ParamAxis::Speed, h)?;
        out = out.axpy(xi[1], &d);
    }
    Ok(out)
}
