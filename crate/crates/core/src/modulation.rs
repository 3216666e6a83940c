//! Renormalized direction `φ`, the quadratic correction `ρ(λ)` and its exact
//! counterpart `ρ̃(λ)`, the `(y, γ, λ, ε)` decomposition near the soliton
//! orbit, coercivity of `S''(Q)` on the constrained subspace and the cubic
//! action landscape.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functionals::{action, action_hessian_form, apply_b, j_functional, linearized_apply_with};
use crate::grid::{fourier_shift, h1_inner, h1_norm, spectral_derivative, ComplexField, GridSpec};
use crate::soliton::SolitonProfile;

#[derive(Debug, Error)]
pub enum ModulationError {
    #[error("singular {0} system")]
    Singular(&'static str),
    #[error("rho_tilde Newton did not converge (|lambda| = {lambda}, residual {residual:e})")]
    RhoTilde { lambda: f64, residual: f64 },
    #[error("|lambda| = {0} exceeds the configured cap {1}")]
    LambdaCap(f64, f64),
    #[error("tube exit: {reason}")]
    TubeExit { reason: String, state: Option<Box<ModulationState>> },
    #[error("assembled quadratic form asymmetry {0:e} exceeds tolerance")]
    Asymmetric(f64),
    #[error("Cholesky factorization of the H1 Gram matrix failed")]
    Gram,
    #[error("cubic fit residual {0:e} exceeds tolerance; lambda range too large")]
    FitResidual(f64),
    #[error("need at least {0} lambda values")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthogonalityDefects {
    pub rotation: f64,
    pub translation: f64,
    pub profile: f64,
    pub boost: f64,
    pub bq: f64,
}

impl OrthogonalityDefects {
    pub fn max(&self) -> f64 {
        [self.rotation, self.translation, self.profile, self.boost, self.bq]
            .into_iter()
            .fold(0.0, |a, b| a.max(b.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct RenormalizedDirection {
    pub phi: ComplexField,
    pub a: f64,
    pub b: f64,
    pub tilde: ComplexField,
    /// Pairings of `φ` with `iQ`, `Q_x`, `Q`, `iQ_x`, `BQ`.
    pub defects: OrthogonalityDefects,
}

/// `φ = φ̃ − a Q_x − b iQ` with `(a, b)` making `φ` orthogonal to `iQ` and `Q_x`.
pub fn renormalize_tangent(
    profile: &SolitonProfile,
    tilde: &ComplexField,
    xi: [f64; 2],
) -> Result<RenormalizedDirection, ModulationError> {
    let iq = profile.gen_rotation();
    let qx = profile.gen_translation();
    let m = Matrix2::new(iq.inner(&qx), iq.inner(&iq), qx.inner(&qx), qx.inner(&iq));
    let rhs = Vector2::new(iq.inner(tilde), qx.inner(tilde));
    let sol = m.lu().solve(&rhs).ok_or(ModulationError::Singular("renormalization"))?;
    let (a, b) = (sol[0], sol[1]);
    let phi = tilde.axpy(-a, &qx).axpy(-b, &iq);
    let defects = OrthogonalityDefects {
        rotation: phi.inner(&iq),
        translation: phi.inner(&qx),
        profile: phi.inner(&profile.q),
        boost: phi.inner(&qx.times_i()),
        bq: phi.inner(&apply_b(&profile.q, xi)),
    };
    Ok(RenormalizedDirection { phi, a, b, tilde: tilde.clone(), defects })
}

/// `−⟨Bφ, φ⟩ / (2⟨BQ, BQ⟩)`
pub fn rho_coefficient(phi: &ComplexField, profile: &SolitonProfile, xi: [f64; 2]) -> f64 {
    let bq = apply_b(&profile.q, xi);
    -apply_b(phi, xi).inner(phi) / (2.0 * bq.inner(&bq))
}

/// `ρ(λ) = −⟨Bφ, φ⟩ / (2⟨BQ, BQ⟩) λ²`
pub fn rho(lambda: f64, phi: &ComplexField, profile: &SolitonProfile, xi: [f64; 2]) -> f64 {
    rho_coefficient(phi, profile, xi) * lambda * lambda
}

pub const RHO_TILDE_MAX_ITER: usize = 50;
pub const DEFAULT_LAMBDA_CAP: f64 = 0.5;

/// Root `ρ̃` of `J(Q + λφ + ρ̃ BQ) = J(Q)` by Newton from `ρ(λ)`.
pub fn rho_tilde(lambda: f64, phi: &ComplexField, profile: &SolitonProfile, xi: [f64; 2]) -> Result<f64, ModulationError> {
    rho_tilde_capped(lambda, phi, profile, xi, DEFAULT_LAMBDA_CAP)
}

pub fn rho_tilde_capped(
    lambda: f64,
    phi: &ComplexField,
    profile: &SolitonProfile,
    xi: [f64; 2],
    cap: f64,
) -> Result<f64, ModulationError> {
    if lambda.abs() > cap {
        return Err(ModulationError::LambdaCap(lambda.abs(), cap));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let bq = apply_b(&profile.q, xi);
    let target = j_functional(&profile.q, xi);
    let tol = 1e-13 * target.abs().max(f64::MIN_POSITIVE);
    let base = profile.q.axpy(lambda, phi);
    let mut r = rho(lambda, phi, profile, xi);
    let mut residual = f64::INFINITY;
    for _ in 0..RHO_TILDE_MAX_ITER {
        let u = base.axpy(r, &bq);
        residual = j_functional(&u, xi) - target;
        if residual.abs() <= tol {
            return Ok(r);
        }
        let slope = apply_b(&u, xi).inner(&bq);
        if slope == 0.0 {
            break;
        }
        r -= residual / slope;
    }
    Err(ModulationError::RhoTilde { lambda, residual })
}

/// `Q + λφ + ρ(λ) BQ`
pub fn modulated_profile(profile: &SolitonProfile, phi: &ComplexField, xi: [f64; 2], lambda: f64) -> ComplexField {
    let r = rho(lambda, phi, profile, xi);
    profile.q.axpy(lambda, phi).axpy(r, &apply_b(&profile.q, xi))
}

/// `x ↦ e^{−iγ} [Q + λφ + ρ(λ)BQ + ε](x − y)`, the inverse of [`decompose`].
pub fn compose(
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
    y: f64,
    gamma: f64,
    lambda: f64,
    eps: Option<&ComplexField>,
) -> ComplexField {
    let mut w = modulated_profile(profile, phi, xi, lambda);
    if let Some(e) = eps {
        w = &w + e;
    }
    fourier_shift(&w, -y).scale_c(Complex64::from_polar(1.0, -gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitAlignment {
    /// Translation `y` and phase `γ` of the nearest orbit point `Q(· − y) e^{iγ}`.
    pub y: f64,
    pub gamma: f64,
    pub distance: f64,
}

fn wrap_centered(v: f64, period: f64) -> f64 {
    let r = v - period * (v / period).round();
    if r <= -0.5 * period {
        r + period
    } else {
        r
    }
}

/// `γ` mapped to `(−π, π]`.
pub fn wrap_phase(gamma: f64) -> f64 {
    wrap_centered(gamma, 2.0 * PI)
}

/// `y` mapped to `(−L/2, L/2]`.
pub fn wrap_translation(y: f64, grid: &GridSpec) -> f64 {
    wrap_centered(y, grid.length())
}

/// Nearest point of the orbit `{Q(· − y) e^{iγ}}` to `u` in `H¹`.
///
/// The H¹ cross-correlation `C(y) = ⟨u(· + y), Q⟩_{H¹}` (complex) is evaluated
/// at every grid shift by FFT; the best shift is refined by Newton on `|C|²`
/// and the phase is `arg C`.
pub fn align_to_orbit(u: &ComplexField, q: &ComplexField) -> OrbitAlignment {
    let grid = *u.grid();
    let n = grid.count();
    let k = grid.wavenumbers();
    let nyq = n / 2;
    let uh = u.spectrum();
    let qh = q.spectrum();
    let weights: Vec<f64> = (0..n).map(|j| if j == nyq { 1.0 } else { 1.0 + k[j] * k[j] }).collect();
    let x: Vec<Complex64> = (0..n).map(|j| uh[j] * qh[j].conj() * weights[j]).collect();
    let scale = grid.dx() / n as f64;
    let corr = ComplexField::from_spectrum(grid, x.clone());
    let best = corr
        .samples()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
        .map(|(m, _)| m)
        .unwrap_or(0);
    let signed = if best > nyq { best as f64 - n as f64 } else { best as f64 };
    let y0 = signed * grid.dx();

    // C, C', C'' at continuous y
    let eval = |y: f64| {
        let mut c = [Complex64::new(0.0, 0.0); 3];
        for j in 0..n {
            let (e, kk) = if j == nyq {
                (Complex64::new((k[j] * y).cos(), 0.0), 0.0)
            } else {
                (Complex64::from_polar(1.0, k[j] * y), k[j])
            };
            let t = x[j] * e;
            c[0] += t;
            c[1] += t * Complex64::new(0.0, kk);
            c[2] -= t * kk * kk;
        }
        c.map(|z| z * scale)
    };
    let (mut lo, mut hi) = (y0 - grid.dx(), y0 + grid.dx());
    let mut y = y0;
    for _ in 0..60 {
        let [c, c1, c2] = eval(y);
        let f1 = 2.0 * (c.conj() * c1).re;
        let f2 = 2.0 * (c1.norm_sqr() + (c.conj() * c2).re);
        if f1 > 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let mut next = if f2 < 0.0 { y - f1 / f2 } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - y).abs() <= 1e-15 * grid.length() {
            y = next;
            break;
        }
        y = next;
    }
    let c = eval(y)[0];
    let gamma = c.arg();
    let diff = &fourier_shift(u, y) - &q.scale_c(Complex64::from_polar(1.0, gamma));
    OrbitAlignment { y: wrap_translation(y, &grid), gamma: wrap_phase(gamma), distance: h1_norm(&diff) }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulationState {
    pub y: f64,
    pub gamma: f64,
    pub lambda: f64,
    #[serde(skip)]
    pub eps: Option<ComplexField>,
    pub eps_h1: f64,
    pub eps_bq: f64,
    pub newton_iters: usize,
    pub residual_norm: f64,
    /// `⟨ε, Q_x⟩`, `⟨ε, iQ⟩`, `⟨ε, φ⟩`
    pub orthogonality: [f64; 3],
}

impl ModulationState {
    pub fn eps(&self) -> &ComplexField {
        self.eps.as_ref().expect("state carries its radiation field")
    }

    /// Copy with `y` in `(−L/2, L/2]` and `γ` in `(−π, π]`.
    pub fn wrapped(&self) -> Self {
        let grid = *self.eps().grid();
        Self { y: wrap_translation(self.y, &grid), gamma: wrap_phase(self.gamma), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposeOptions {
    /// Tube radius δ; `None` means 0.3 ‖Q‖_{H¹}.
    pub tube_radius: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self { tube_radius: None, tol: 1e-14, max_iter: 50, fd_step: 1e-7 }
    }
}

pub fn default_tube_radius(profile: &SolitonProfile) -> f64 {
    0.3 * h1_norm(&profile.q)
}

/// Everything about `(Q, φ, ξ)` that [`decompose`] reuses between calls.
#[derive(Debug, Clone)]
pub struct Decomposer {
    profile: SolitonProfile,
    phi: ComplexField,
    xi: [f64; 2],
    bq: ComplexField,
    iq: ComplexField,
    rho_coef: f64,
    norms: [f64; 3],
    opts: DecomposeOptions,
}

impl Decomposer {
    pub fn new(profile: &SolitonProfile, phi: &ComplexField, xi: [f64; 2], opts: DecomposeOptions) -> Self {
        let iq = profile.gen_rotation();
        Self {
            profile: profile.clone(),
            phi: phi.clone(),
            xi,
            bq: apply_b(&profile.q, xi),
            norms: [profile.qx.l2_norm(), iq.l2_norm(), phi.l2_norm().max(f64::MIN_POSITIVE)],
            iq,
            rho_coef: rho_coefficient(phi, profile, xi),
            opts,
        }
    }

    pub fn tube_radius(&self) -> f64 {
        self.opts.tube_radius.unwrap_or_else(|| default_tube_radius(&self.profile))
    }

    pub fn profile(&self) -> &SolitonProfile {
        &self.profile
    }

    fn eps_at(&self, u: &ComplexField, p: &[f64; 3]) -> ComplexField {
        let w = fourier_shift(u, p[0]).scale_c(Complex64::from_polar(1.0, p[1]));
        let r = self.rho_coef * p[2] * p[2];
        let q = &self.profile.q;
        let out = (0..w.samples().len())
            .map(|j| w.samples()[j] - q.samples()[j] - p[2] * self.phi.samples()[j] - r * self.bq.samples()[j])
            .collect();
        ComplexField::new(*u.grid(), out).unwrap_or_else(|_| ComplexField::zeros(*u.grid()))
    }

    fn residual(&self, eps: &ComplexField) -> Vector3<f64> {
        Vector3::new(
            eps.inner(&self.profile.qx) / self.norms[0],
            eps.inner(&self.iq) / self.norms[1],
            eps.inner(&self.phi) / self.norms[2],
        )
    }

    /// Seed from the nearest orbit point and the projection on `φ`.
    pub fn seed(&self, u: &ComplexField) -> [f64; 3] {
        let al = align_to_orbit(u, &self.profile.q);
        let w = fourier_shift(u, al.y).scale_c(Complex64::from_polar(1.0, -al.gamma));
        let lambda = (&w - &self.profile.q).inner(&self.phi) / (self.norms[2] * self.norms[2]);
        [al.y, -al.gamma, lambda]
    }

    /// Newton solve with raw (unwrapped) `y` and `γ`.
    pub fn decompose_raw(&self, u: &ComplexField, seed: Option<[f64; 3]>) -> Result<ModulationState, ModulationError> {
        if !u.same_grid(&self.profile.q) {
            return Err(ModulationError::TubeExit { reason: "field is on a different grid".into(), state: None });
        }
        let mut p = seed.unwrap_or_else(|| self.seed(u));
        let tol = self.opts.tol * (1.0 + u.l2_norm());
        let h = self.opts.fd_step;
        let mut eps = self.eps_at(u, &p);
        let mut f = self.residual(&eps);
        let mut iters = 0;
        let mut converged = f.amax() <= tol;
        while !converged && iters < self.opts.max_iter {
            iters += 1;
            let mut jac = Matrix3::zeros();
            for c in 0..3 {
                let mut q = p;
                q[c] += h;
                let fc = self.residual(&self.eps_at(u, &q));
                jac.set_column(c, &((fc - f) / h));
            }
            let step = jac.lu().solve(&(-f)).ok_or(ModulationError::Singular("decomposition Jacobian"))?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let trial = [p[0] + t * step[0], p[1] + t * step[1], p[2] + t * step[2]];
                let e = self.eps_at(u, &trial);
                let ft = self.residual(&e);
                if ft.norm() < f.norm() {
                    p = trial;
                    eps = e;
                    f = ft;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if f.amax() <= tol {
                converged = true;
            } else if !accepted {
                // no descent left: accept if already at rounding level
                converged = f.amax() <= 1e3 * tol;
                break;
            }
        }
        let state = ModulationState {
            y: p[0],
            gamma: p[1],
            lambda: p[2],
            eps_h1: h1_norm(&eps),
            eps_bq: eps.inner(&self.bq),
            newton_iters: iters,
            residual_norm: f.amax(),
            orthogonality: [eps.inner(&self.profile.qx), eps.inner(&self.iq), eps.inner(&self.phi)],
            eps: Some(eps),
        };
        if !converged || !p.iter().all(|v| v.is_finite()) {
            return Err(ModulationError::TubeExit {
                reason: format!("Newton did not converge (residual {:e})", state.residual_norm),
                state: Some(Box::new(state)),
            });
        }
        let delta = self.tube_radius();
        if state.eps_h1 > delta {
            return Err(ModulationError::TubeExit {
                reason: format!("|eps|_H1 = {:e} exceeds tube radius {:e}", state.eps_h1, delta),
                state: Some(Box::new(state)),
            });
        }
        Ok(state)
    }

    /// Decomposition with `y ∈ (−L/2, L/2]` and `γ ∈ (−π, π]`.
    pub fn decompose(&self, u: &ComplexField, seed: Option<[f64; 3]>) -> Result<ModulationState, ModulationError> {
        self.decompose_raw(u, seed).map(|s| s.wrapped())
    }

    pub fn phi(&self) -> &ComplexField {
        &self.phi
    }

    pub fn xi(&self) -> [f64; 2] {
        self.xi
    }

    pub fn bq(&self) -> &ComplexField {
        &self.bq
    }
}

/// `(y, γ, λ, ε)` with `ε = u(· + y) e^{iγ} − (Q + λφ + ρ(λ)BQ)` orthogonal to
/// `Q_x`, `iQ` and `φ`.
pub fn decompose(
    u: &ComplexField,
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
    seed: Option<[f64; 3]>,
    opts: DecomposeOptions,
) -> Result<ModulationState, ModulationError> {
    Decomposer::new(profile, phi, xi, opts).decompose(u, seed)
}

/// `⟨ε, BQ⟩`
pub fn check_eps_bq(state: &ModulationState, profile: &SolitonProfile, xi: [f64; 2]) -> f64 {
    state.eps().inner(&apply_b(&profile.q, xi))
}

/// Orthonormal basis (columns) of the complement of the column span of `u`,
/// from the Householder reflectors of its QR factorization.
fn orthogonal_complement(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = u.shape();
    let mut a = u.clone();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(m);
    for k in 0..m {
        let mut v = DVector::zeros(n);
        for i in k..n {
            v[i] = a[(i, k)];
        }
        let alpha = -v[k].signum() * v.norm();
        let alpha = if alpha == 0.0 { v.norm() } else { alpha };
        v[k] -= alpha;
        let vn = v.norm();
        if vn > 0.0 {
            v /= vn;
            let proj = v.transpose() * &a;
            a -= 2.0 * &v * proj;
        }
        reflectors.push(v);
    }
    let mut q = DMatrix::zeros(n, n - m);
    for j in 0..n - m {
        q[(m + j, j)] = 1.0;
    }
    for v in reflectors.iter().rev() {
        let proj = v.transpose() * &q;
        q -= 2.0 * v * proj;
    }
    q
}

fn to_coords(f: &ComplexField) -> DVector<f64> {
    let n = f.samples().len();
    DVector::from_fn(2 * n, |i, _| if i < n { f.samples()[i].re } else { f.samples()[i - n].im })
}

fn from_coords(v: &DVector<f64>, grid: GridSpec) -> ComplexField {
    let n = grid.count();
    let samples = (0..n).map(|i| Complex64::new(v[i], v[i + n])).collect();
    ComplexField::new(grid, samples).expect("finite coordinates")
}

/// The quadratic forms of `S''(Q)` and of the H¹ inner product on the real
/// nodal basis `{δ_j, iδ_j}`.
#[derive(Debug, Clone)]
pub struct AssembledForms {
    pub hessian: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    /// `‖A − Aᵀ‖_F / (2‖A‖_F)` before symmetrization. Quadratic forms only see
    /// the symmetric part, so this measures discretization quality, not error in κ.
    pub asymmetry: f64,
}

pub fn assemble_forms(profile: &SolitonProfile) -> AssembledForms {
    let grid = profile.grid;
    let n = grid.count();
    let dx = grid.dx();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    let mut d = DMatrix::zeros(2 * n, 2 * n);
    for col in 0..2 * n {
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        e[col % n] = if col < n { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 1.0) };
        let e = ComplexField::new(grid, e).expect("unit vector");
        let le = linearized_apply_with(&profile.q, &profile.qx, &e, &profile.params);
        a.set_column(col, &(to_coords(&le) * dx));
        d.set_column(col, &to_coords(&spectral_derivative(&e)));
    }
    let asymmetry = (&a - a.transpose()).norm() / (2.0 * a.norm());
    let hessian = (&a + a.transpose()) * 0.5;
    let gram = (DMatrix::identity(2 * n, 2 * n) + d.transpose() * &d) * dx;
    AssembledForms { hessian, gram, asymmetry }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoercivityEstimate {
    /// Constant used downstream: `min(kappa_orth, kappa_tp2)` times a 0.99 safety factor.
    pub kappa: f64,
    /// Minimum of `S''(Q)(ε, ε) / ‖ε‖²_{H¹}` on the complement of `{iQ, Q_x, φ, BQ}`.
    pub kappa_orth: f64,
    /// Same minimum without the `BQ` constraint.
    pub min_three_constraints: f64,
    /// Largest κ with `S''(ε, ε) ≥ κ‖ε‖²_{H¹} − ⟨ε, BQ⟩²/κ` on the complement of `{iQ, Q_x, φ}`.
    pub kappa_tp2: f64,
    pub asymmetry: f64,
    pub constraints: Vec<String>,
    #[serde(skip)]
    pub minimizer: Option<ComplexField>,
}

pub const ASYMMETRY_TOL: f64 = 0.05;

struct ReducedPencil {
    z: DMatrix<f64>,
    l: DMatrix<f64>,
    eig: nalgebra::SymmetricEigen<f64, nalgebra::Dyn>,
}

fn reduced_pencil(forms: &AssembledForms, constraints: &[&ComplexField]) -> Result<ReducedPencil, ModulationError> {
    let n2 = forms.hessian.nrows();
    let mut c = DMatrix::zeros(n2, constraints.len());
    for (j, f) in constraints.iter().enumerate() {
        let v = to_coords(f);
        c.set_column(j, &(&v / v.norm()));
    }
    let z = orthogonal_complement(&c);
    let ar = z.transpose() * &forms.hessian * &z;
    let gr = z.transpose() * &forms.gram * &z;
    let chol = gr.cholesky().ok_or(ModulationError::Gram)?;
    let l = chol.l();
    let linv_a = l.solve_lower_triangular(&ar).ok_or(ModulationError::Gram)?;
    let m = l.solve_lower_triangular(&linv_a.transpose()).ok_or(ModulationError::Gram)?;
    let m = (&m + m.transpose()) * 0.5;
    Ok(ReducedPencil { z, l, eig: m.symmetric_eigen() })
}

fn min_eigen(eig: &nalgebra::SymmetricEigen<f64, nalgebra::Dyn>) -> (usize, f64) {
    eig.eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, &v)| (i, v))
        .expect("non-empty spectrum")
}

/// Largest κ ∈ (0, cap] with `diag(μ) − κI + bbᵀ/κ ⪰ 0`.
fn rank_one_kappa(mu: &[f64], b: &[f64], cap: f64) -> f64 {
    let ok = |k: f64| {
        let below: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] < k).collect();
        match below.len() {
            0 => true,
            1 => {
                if b.iter().zip(mu).any(|(bi, &m)| m == k && *bi != 0.0) {
                    return false;
                }
                let s: f64 = mu.iter().zip(b).filter(|(&m, _)| m != k).map(|(&m, &bi)| bi * bi / (m - k)).sum();
                1.0 + s / k <= 0.0
            }
            _ => false,
        }
    };
    if ok(cap) {
        return cap;
    }
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Coercivity constant of `S''(Q)` on the constrained subspace, from the
/// generalized eigenproblem against the H¹ Gram form.
pub fn coercivity_estimate(
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
) -> Result<CoercivityEstimate, ModulationError> {
    let forms = assemble_forms(profile);
    if forms.asymmetry > ASYMMETRY_TOL {
        return Err(ModulationError::Asymmetric(forms.asymmetry));
    }
    let iq = profile.gen_rotation();
    let qx = profile.gen_translation();
    let bq = apply_b(&profile.q, xi);

    let four = reduced_pencil(&forms, &[&iq, &qx, phi, &bq])?;
    let (imin, kappa_orth) = min_eigen(&four.eig);
    let w = four.l.transpose().solve_upper_triangular(&four.eig.eigenvectors.column(imin).into_owned());
    let minimizer = w.map(|w| from_coords(&(&four.z * w), profile.grid));

    let three = reduced_pencil(&forms, &[&iq, &qx, phi])?;
    let (_, min3) = min_eigen(&three.eig);
    // BQ as a functional on the reduced space: ⟨ε, BQ⟩ = dx · bᵀ Z w with w = L⁻ᵀ s
    let bz = three.z.transpose() * to_coords(&bq) * profile.grid.dx();
    let bl = three.l.solve_lower_triangular(&bz).ok_or(ModulationError::Gram)?;
    let bt = three.eig.eigenvectors.transpose() * bl;
    let mu: Vec<f64> = three.eig.eigenvalues.iter().copied().collect();
    let b: Vec<f64> = bt.iter().copied().collect();
    let kappa_tp2 = rank_one_kappa(&mu, &b, kappa_orth.max(1e-12));

    Ok(CoercivityEstimate {
        kappa: 0.99 * kappa_orth.min(kappa_tp2),
        kappa_orth,
        min_three_constraints: min3,
        kappa_tp2,
        asymmetry: forms.asymmetry,
        constraints: vec!["iQ".into(), "Q_x".into(), "phi".into(), "BQ".into()],
        minimizer,
    })
}

/// `S''(Q)(ε, ε) / ‖ε‖²_{H¹}`
pub fn rayleigh_quotient(profile: &SolitonProfile, eps: &ComplexField) -> f64 {
    action_hessian_form(&profile.q, eps, eps, &profile.params) / h1_inner(eps, eps)
}

/// Removes the components of `f` along `basis` in the real pairing.
pub fn project_out(f: &ComplexField, basis: &[&ComplexField]) -> ComplexField {
    let k = basis.len();
    let gram = DMatrix::from_fn(k, k, |i, j| basis[i].inner(basis[j]));
    let rhs = DVector::from_fn(k, |i, _| basis[i].inner(f));
    let coef = gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k));
    basis.iter().zip(coef.iter()).fold(f.clone(), |acc, (b, &c)| acc.axpy(-c, b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub lambdas: Vec<f64>,
    pub values: Vec<f64>,
    /// Least-squares coefficients of `λ², λ³, λ⁴, λ⁵`.
    pub coefficients: [f64; 4],
    pub c3: f64,
    pub offset: f64,
    pub fit_residual: f64,
}

impl ExpansionReport {
    pub fn relative_gap(&self, d3: f64) -> f64 {
        (self.c3 - d3 / 6.0).abs() / (d3 / 6.0).abs()
    }
}

/// Evaluates `S(Q + λφ + ρ(λ)BQ [+ ε]) − S(Q)` and fits `c₂λ² + … + c₅λ⁵`
/// after removing the `½S''(Q)(ε, ε)` offset.
pub fn action_expansion_probe(
    profile: &SolitonProfile,
    phi: &ComplexField,
    xi: [f64; 2],
    lambdas: &[f64],
    eps: Option<&ComplexField>,
    fit_tol: f64,
) -> Result<ExpansionReport, ModulationError> {
    if lambdas.len() < 4 {
        return Err(ModulationError::TooFewPoints(4));
    }
    let params = profile.params;
    let s0 = action(&profile.q, &params);
    let offset = eps.map_or(0.0, |e| 0.5 * action_hessian_form(&profile.q, e, e, &params));
    let values: Vec<f64> = lambdas
        .iter()
        .map(|&l| {
            let mut u = modulated_profile(profile, phi, xi, l);
            if let Some(e) = eps {
                u = &u + e;
            }
            action(&u, &params) - s0 - offset
        })
        .collect();
    let lmax = lambdas.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    // scaled monomials keep the least-squares system well conditioned
    let design = DMatrix::from_fn(lambdas.len(), 4, |i, j| (lambdas[i] / lmax).powi(j as i32 + 2));
    let rhs = DVector::from_column_slice(&values);
    let svd = design.clone().svd(true, true);
    let sol = svd.solve(&rhs, 1e-14).map_err(|_| ModulationError::Singular("cubic fit"))?;
    let coefficients: [f64; 4] = std::array::from_fn(|j| sol[j] / lmax.powi(j as i32 + 2));
    let fitted = &design * &sol;
    let fit_residual = (fitted - &rhs).amax() / rhs.amax().max(f64::MIN_POSITIVE);
    if fit_residual > fit_tol {
        return Err(ModulationError::FitResidual(fit_residual));
    }
    Ok(ExpansionReport {
        lambdas: lambdas.to_vec(),
        values,
        coefficients,
        c3: coefficients[1],
        offset,
        fit_residual,
    })
}
