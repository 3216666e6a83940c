//! Conserved functionals, the action and its derivatives, the constraint
//! functional `J_ξ` with `B = J_ξ'`, and the scalar `d(ω, c) = S(Q_{ω,c})`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{spectral_derivative, spectral_second_derivative, ComplexField, GridSpec, I};
use crate::par::Execution;
use crate::soliton::{build_profile, tangent_vector, SolitonError, SolitonParams, SolitonProfile};

/// `M = ½ ∫ |u|²`
pub fn mass(u: &ComplexField) -> f64 {
    0.5 * u.inner(u)
}

/// `P = ½ Re ∫ i ū u_x`
pub fn momentum(u: &ComplexField) -> f64 {
    0.5 * spectral_derivative(u).times_i().inner(u)
}

/// `½ ∫ |u_x|²`
pub fn kinetic(u: &ComplexField) -> f64 {
    let ux = spectral_derivative(u);
    0.5 * ux.inner(&ux)
}

/// `𝒩 = (1/(2σ+2)) Re ∫ i |u|^{2σ} ū u_x`
pub fn nonlinear_part(u: &ComplexField, sigma: f64) -> f64 {
    let ux = spectral_derivative(u);
    let weighted = ux.zip_map(u, |d, v| I * d * v.norm_sqr().powf(sigma));
    weighted.inner(u) / (2.0 * sigma + 2.0)
}

/// `E = ½ ∫ |u_x|² − 𝒩`
pub fn energy(u: &ComplexField, sigma: f64) -> f64 {
    kinetic(u) - nonlinear_part(u, sigma)
}

/// `𝒬 = ½ ∫ |u_x|² + ωM + cP`
pub fn quadratic_part(u: &ComplexField, params: &SolitonParams) -> f64 {
    kinetic(u) + params.omega * mass(u) + params.speed * momentum(u)
}

/// `S = E + ωM + cP`
pub fn action(u: &ComplexField, params: &SolitonParams) -> f64 {
    quadratic_part(u, params) - nonlinear_part(u, params.sigma)
}

/// `K = 2𝒬 − (2σ+2)𝒩`, the derivative of `S(λu)` at `λ = 1`.
pub fn scaling_k(u: &ComplexField, params: &SolitonParams) -> f64 {
    2.0 * quadratic_part(u, params) - (2.0 * params.sigma + 2.0) * nonlinear_part(u, params.sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub mass: f64,
    pub momentum: f64,
    pub energy: f64,
    pub action: f64,
    pub scaling_k: f64,
}

pub fn functional_report(u: &ComplexField, params: &SolitonParams) -> FunctionalReport {
    let m = mass(u);
    let p = momentum(u);
    let kin = kinetic(u);
    let n = nonlinear_part(u, params.sigma);
    let q = kin + params.omega * m + params.speed * p;
    FunctionalReport {
        mass: m,
        momentum: p,
        energy: kin - n,
        action: q - n,
        scaling_k: 2.0 * q - (2.0 * params.sigma + 2.0) * n,
    }
}

/// `J_ξ = ξ₁ M + ξ₂ P`
pub fn j_functional(u: &ComplexField, xi: [f64; 2]) -> f64 {
    xi[0] * mass(u) + xi[1] * momentum(u)
}

/// `B u = ξ₁ u + ξ₂ i u_x`, the gradient of `J_ξ`.
pub fn apply_b(u: &ComplexField, xi: [f64; 2]) -> ComplexField {
    u.scale(xi[0]).axpy(xi[1], &spectral_derivative(u).times_i())
}

/// The field `−u_xx + ωu + c i u_x − i|u|^{2σ} u_x` representing `S'(u)`.
pub fn action_gradient(u: &ComplexField, params: &SolitonParams) -> ComplexField {
    crate::soliton::profile_operator(u, params.omega, params.speed, params.sigma)
}

/// `f(u) = i |u|^{2σ} u_x`
pub fn nonlinearity(u: &ComplexField, sigma: f64) -> ComplexField {
    let ux = spectral_derivative(u);
    u.zip_map(&ux, |v, d| I * v.norm_sqr().powf(sigma) * d)
}

/// First variation of `f` at `u` along `h`:
/// `R₁ = i|u|^{2σ} h_x + iσ|u|^{2σ−2}(ū u_x h + u u_x h̄)`.
pub fn nonlinearity_first_variation(u: &ComplexField, ux: &ComplexField, h: &ComplexField, sigma: f64) -> ComplexField {
    let hx = spectral_derivative(h);
    let out = u
        .samples()
        .iter()
        .zip(ux.samples())
        .zip(h.samples().iter().zip(hx.samples()))
        .map(|((&v, &vx), (&w, &wx))| {
            let r2 = v.norm_sqr();
            let m = r2.powf(sigma);
            let m1 = r2.powf(sigma - 1.0);
            I * (m * wx + sigma * m1 * (v.conj() * vx * w + v * vx * w.conj()))
        })
        .collect();
    ComplexField::from_vec(*u.grid(), out)
}

/// Second variation `D²f(u)[f, h]`; symmetric in `(f, h)`.
pub fn nonlinearity_second_variation(
    u: &ComplexField,
    ux: &ComplexField,
    f: &ComplexField,
    h: &ComplexField,
    sigma: f64,
) -> ComplexField {
    let fx = spectral_derivative(f);
    let hx = spectral_derivative(h);
    let out = (0..u.samples().len())
        .map(|j| {
            let q = u.samples()[j];
            let qx = ux.samples()[j];
            let (a, ax) = (f.samples()[j], fx.samples()[j]);
            let (b, bx) = (h.samples()[j], hx.samples()[j]);
            let r2 = q.norm_sqr();
            if r2 == 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            let w = sigma * r2.powf(sigma - 1.0);
            let qb2 = q.conj() * q.conj() / r2;
            let q2 = q * q / r2;
            let term = (q * a.conj() + q.conj() * a) * bx
                + (q.conj() * ax + sigma * qx * a.conj() + (sigma - 1.0) * qb2 * qx * a) * b
                + (q * ax + sigma * qx * a + (sigma - 1.0) * q2 * qx * a.conj()) * b.conj();
            I * w * term
        })
        .collect();
    ComplexField::from_vec(*u.grid(), out)
}

/// `L h = −h_xx + ωh + c i h_x − R₁(u, h)`, the Hessian of the action at `u` as an operator.
pub fn linearized_apply(u: &ComplexField, h: &ComplexField, params: &SolitonParams) -> ComplexField {
    let ux = spectral_derivative(u);
    linearized_apply_with(u, &ux, h, params)
}

pub(crate) fn linearized_apply_with(
    u: &ComplexField,
    ux: &ComplexField,
    h: &ComplexField,
    params: &SolitonParams,
) -> ComplexField {
    let hx = spectral_derivative(h);
    let hxx = spectral_second_derivative(h);
    let r1 = nonlinearity_first_variation(u, ux, h, params.sigma);
    let out = (0..h.samples().len())
        .map(|j| {
            -hxx.samples()[j] + params.omega * h.samples()[j] + I * params.speed * hx.samples()[j]
                - r1.samples()[j]
        })
        .collect();
    ComplexField::from_vec(*u.grid(), out)
}

/// `S''(u)(h, g)`
pub fn action_hessian_form(u: &ComplexField, h: &ComplexField, g: &ComplexField, params: &SolitonParams) -> f64 {
    linearized_apply(u, h, params).inner(g)
}

/// `S'''(u)(f, h, g) = −⟨D²f(u)[f, h], g⟩`. Only the nonlinear part contributes.
pub fn action_third_form(u: &ComplexField, f: &ComplexField, h: &ComplexField, g: &ComplexField, sigma: f64) -> f64 {
    let ux = spectral_derivative(u);
    -nonlinearity_second_variation(u, &ux, f, h, sigma).inner(g)
}

/// `S'''(Q)(f, h, g)` at a built profile.
pub fn action_third_form_at_q(profile: &SolitonProfile, f: &ComplexField, h: &ComplexField, g: &ComplexField) -> f64 {
    -nonlinearity_second_variation(&profile.q, &profile.qx, f, h, profile.params.sigma).inner(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DSurface {
    pub d: f64,
    pub grad: [f64; 2],
    /// Symmetrized `[[d_ωω, d_ωc], [d_cω, d_cc]]`.
    pub hessian: [[f64; 2]; 2],
    pub fd_step: f64,
    pub symmetry_defect: f64,
}

impl DSurface {
    pub fn det(&self) -> f64 {
        self.hessian[0][0] * self.hessian[1][1] - self.hessian[0][1] * self.hessian[1][0]
    }

    pub fn hessian_norm(&self) -> f64 {
        self.hessian.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Eigenvalues of the symmetrized Hessian, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let [[a, b], [_, c]] = self.hessian;
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        [mid - rad, mid + rad]
    }
}

pub const DEFAULT_SURFACE_STEP: f64 = 1e-4;

/// `(d, M(Q), P(Q))` at one parameter point.
pub fn d_point(params: &SolitonParams, grid: &GridSpec) -> Result<(f64, f64, f64), SolitonError> {
    let prof = build_profile(params, grid)?;
    let r = functional_report(&prof.q, params);
    Ok((r.action, r.mass, r.momentum))
}

/// `d = S(Q)`, its gradient `(M(Q), P(Q))` and the Hessian from central
/// differences of the gradient.
pub fn d_surface(
    params: &SolitonParams,
    grid: &GridSpec,
    h: Option<f64>,
    exec: Execution,
) -> Result<DSurface, SolitonError> {
    let h = h.unwrap_or(DEFAULT_SURFACE_STEP);
    let points = [
        *params,
        params.with_omega(params.omega + h),
        params.with_omega(params.omega - h),
        params.with_speed(params.speed + h),
        params.with_speed(params.speed - h),
    ];
    for p in &points {
        p.validate()?;
    }
    let vals = exec.map(&points, |p| d_point(p, grid));
    let vals: Vec<(f64, f64, f64)> = vals.into_iter().collect::<Result<_, _>>()?;
    let (d, m, p) = vals[0];
    let dw = [(vals[1].1 - vals[2].1) / (2.0 * h), (vals[1].2 - vals[2].2) / (2.0 * h)];
    let dc = [(vals[3].1 - vals[4].1) / (2.0 * h), (vals[3].2 - vals[4].2) / (2.0 * h)];
    let off = 0.5 * (dw[1] + dc[0]);
    Ok(DSurface {
        d,
        grad: [m, p],
        hessian: [[dw[0], off], [off, dc[1]]],
        fd_step: h,
        symmetry_defect: (dw[1] - dc[0]).abs(),
    })
}

/// Central differences of `d` itself, as an independent check on `(M(Q), P(Q))`.
pub fn d_gradient_fd(params: &SolitonParams, grid: &GridSpec, h: f64) -> Result<[f64; 2], SolitonError> {
    let d = |p: SolitonParams| d_point(&p, grid).map(|v| v.0);
    Ok([
        (d(params.with_omega(params.omega + h))? - d(params.with_omega(params.omega - h))?) / (2.0 * h),
        (d(params.with_speed(params.speed + h))? - d(params.with_speed(params.speed - h))?) / (2.0 * h),
    ])
}

/// `(g(2h) − 2g(h) + 2g(−h) − g(−2h)) / (2h³)`
pub fn third_difference(g: impl Fn(f64) -> f64, h: f64) -> f64 {
    (g(2.0 * h) - 2.0 * g(h) + 2.0 * g(-h) - g(-2.0 * h)) / (2.0 * h * h * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThirdDerivative {
    pub step: f64,
    pub at_h: f64,
    pub at_half_h: f64,
    /// Richardson combination `(4 D(h/2) − D(h)) / 3`.
    pub value: f64,
    /// `S'''(Q)(φ̃, φ̃, φ̃) + 3⟨Bφ̃, φ̃⟩`
    pub identity: f64,
    pub rel_gap: f64,
}

pub const DEFAULT_THIRD_STEP: f64 = 1e-2;

/// Third derivative of `λ ↦ d(ω + λξ₁, c + λξ₂)` at 0 by five-point
/// differences at `h` and `h/2`, cross-checked against the identity route.
pub fn d_third_directional(
    params: &SolitonParams,
    xi: [f64; 2],
    grid: &GridSpec,
    h: Option<f64>,
    exec: Execution,
) -> Result<ThirdDerivative, SolitonError> {
    let h = h.unwrap_or_else(|| DEFAULT_THIRD_STEP * params.omega.abs().max(params.speed.abs()).max(1.0));
    if xi == [0.0, 0.0] {
        return Ok(ThirdDerivative { step: h, at_h: 0.0, at_half_h: 0.0, value: 0.0, identity: 0.0, rel_gap: 0.0 });
    }
    let offsets = [2.0 * h, h, -h, -2.0 * h, h, 0.5 * h, -0.5 * h, -h];
    let shifted: Vec<SolitonParams> = offsets
        .iter()
        .map(|&t| SolitonParams { omega: params.omega + t * xi[0], speed: params.speed + t * xi[1], ..*params })
        .collect();
    for p in &shifted {
        p.validate()?;
    }
    let vals = exec.map(&shifted, |p| d_point(p, grid).map(|v| v.0));
    let v: Vec<f64> = vals.into_iter().collect::<Result<_, _>>()?;
    let at_h = (v[0] - 2.0 * v[1] + 2.0 * v[2] - v[3]) / (2.0 * h * h * h);
    let hh = 0.5 * h;
    let at_half_h = (v[4] - 2.0 * v[5] + 2.0 * v[6] - v[7]) / (2.0 * hh * hh * hh);
    let value = (4.0 * at_half_h - at_h) / 3.0;

    let prof = build_profile(params, grid)?;
    let tilde = tangent_vector(&prof, xi, None)?;
    let identity = third_identity(&prof, &tilde, xi);
    Ok(ThirdDerivative {
        step: h,
        at_h,
        at_half_h,
        value,
        identity,
        rel_gap: (value - identity).abs() / value.abs().max(identity.abs()),
    })
}

/// `S'''(Q)(v, v, v) + 3⟨Bv, v⟩`
pub fn third_identity(profile: &SolitonProfile, v: &ComplexField, xi: [f64; 2]) -> f64 {
    action_third_form_at_q(profile, v, v, v) + 3.0 * apply_b(v, xi).inner(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn bump(grid: GridSpec, x0: f64, w: f64, k: f64, amp: Complex64) -> ComplexField {
        ComplexField::from_fn(grid, |x| amp * (-(x - x0) * (x - x0) / (w * w)).exp() * Complex64::from_polar(1.0, k * x))
    }

    fn params() -> SolitonParams {
        SolitonParams { sigma: 1.5, omega: 1.0, speed: 0.3 }
    }

    #[test]
    fn zero_field() {
        let z = ComplexField::zeros(GridSpec::new(40.0, 256).unwrap());
        let p = params();
        assert_eq!(mass(&z), 0.0);
        assert_eq!(momentum(&z), 0.0);
        assert_eq!(energy(&z, 1.5), 0.0);
        assert_eq!(scaling_k(&z, &p), 0.0);
        assert_eq!(action_gradient(&z, &p).max_abs(), 0.0);
    }

    #[test]
    fn real_field_has_no_momentum() {
        let g = GridSpec::new(40.0, 512).unwrap();
        let u = bump(g, 0.3, 1.7, 0.0, Complex64::new(1.3, 0.0));
        assert!(momentum(&u).abs() < 1e-15);
    }

    #[test]
    fn action_recombines() {
        let g = GridSpec::new(40.0, 512).unwrap();
        let u = bump(g, 0.3, 1.7, 0.8, Complex64::new(1.1, 0.4));
        let p = params();
        let r = functional_report(&u, &p);
        let recombined = r.energy + p.omega * r.mass + p.speed * r.momentum;
        assert!((recombined - r.action).abs() < 1e-13 * r.action.abs().max(1.0));
        assert!((r.action - action(&u, &p)).abs() < 1e-13 * r.action.abs().max(1.0));
    }

    #[test]
    fn b_identity() {
        let g = GridSpec::new(40.0, 512).unwrap();
        let u = bump(g, -1.0, 2.0, 1.3, Complex64::new(0.7, -0.2));
        let xi = [0.37, -1.4];
        assert!((apply_b(&u, xi).inner(&u) - 2.0 * j_functional(&u, xi)).abs() < 1e-12);
        assert!((&apply_b(&u, [1.0, 0.0]) - &u).max_abs() == 0.0);
    }

    #[test]
    fn gradient_matches_directional_difference() {
        let g = GridSpec::new(40.0, 512).unwrap();
        let u = bump(g, 0.0, 1.5, 0.7, Complex64::new(1.2, 0.3));
        let h = bump(g, 0.8, 2.1, -0.4, Complex64::new(0.2, 0.9));
        let p = params();
        let exact = action_gradient(&u, &p).inner(&h);
        let fd = |t: f64| (action(&u.axpy(t, &h), &p) - action(&u.axpy(-t, &h), &p)) / (2.0 * t);
        let e1 = (fd(1e-2) - exact).abs();
        let e2 = (fd(5e-3) - exact).abs();
        assert!(e1 / e2 > 3.5 && e1 / e2 < 4.5, "{e1} {e2}");
    }

    #[test]
    fn hessian_is_symmetric_and_matches_second_difference() {
        let g = GridSpec::new(40.0, 512).unwrap();
        let u = bump(g, 0.0, 1.5, 0.7, Complex64::new(1.2, 0.3));
        let h = bump(g, 0.8, 2.1, -0.4, Complex64::new(0.2, 0.9));
        let k = bump(g, -0.5, 1.1, 0.9, Complex64::new(-0.6, 0.5));
        let p = params();
        let a = action_hessian_form(&u, &h, &k, &p);
        let b = action_hessian_form(&u, &k, &h, &p);
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        let exact = action_hessian_form(&u, &h, &h, &p);
        let fd = |t: f64| {
            (action(&u.axpy(t, &h), &p) - 2.0 * action(&u, &p) + action(&u.axpy(-t, &h), &p)) / (t * t)
        };
        let e1 = (fd(2e-2) - exact).abs();
        let e2 = (fd(1e-2) - exact).abs();
        assert!(e1 / e2 > 3.0 && e1 / e2 < 5.0, "{e1} {e2}");
    }

    #[test]
    fn third_form_symmetry_and_linearity() {
        let g = GridSpec::new(40.0, 512).unwrap();
        let u = bump(g, 0.0, 1.5, 0.7, Complex64::new(1.2, 0.3));
        let f = bump(g, 0.8, 2.1, -0.4, Complex64::new(0.2, 0.9));
        let h = bump(g, -0.5, 1.1, 0.9, Complex64::new(-0.6, 0.5));
        let k = bump(g, 0.1, 1.9, 0.2, Complex64::new(0.3, -0.1));
        let s = 1.5;
        let base = action_third_form(&u, &f, &h, &k, s);
        for v in [
            action_third_form(&u, &f, &k, &h, s),
            action_third_form(&u, &h, &f, &k, s),
            action_third_form(&u, &h, &k, &f, s),
            action_third_form(&u, &k, &f, &h, s),
            action_third_form(&u, &k, &h, &f, s),
        ] {
            assert!((v - base).abs() < 1e-10 * base.abs().max(1e-3), "{v} {base}");
        }
        let doubled = action_third_form(&u, &f.scale(2.0), &h, &k, s);
        assert!((doubled - 2.0 * base).abs() < 1e-13 * base.abs().max(1.0));
    }

    #[test]
    fn profile_null_directions() {
        let g = GridSpec::new(80.0, 1024).unwrap();
        let p = SolitonParams::new(1.5, 1.0, 0.2).unwrap();
        let prof = build_profile(&p, &g).unwrap();
        let k = bump(g, 0.4, 2.0, 0.3, Complex64::new(0.5, 0.8));
        let scale = action_hessian_form(&prof.q, &k, &k, &p).abs();
        assert!(action_hessian_form(&prof.q, &prof.gen_rotation(), &k, &p).abs() < 1e-9 * scale);
        assert!(action_hessian_form(&prof.q, &prof.gen_translation(), &k, &p).abs() < 1e-9 * scale);
        assert!(scaling_k(&prof.q, &p).abs() < 1e-10);
    }

    #[test]
    fn third_difference_is_exact_on_cubics() {
        let g = |t: f64| 0.5 - 1.25 * t + 3.0 * t * t - 0.75 * t * t * t;
        assert!((third_difference(g, 0.1) + 4.5).abs() < 1e-9);
    }
}
