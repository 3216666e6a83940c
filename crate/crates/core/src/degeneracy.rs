//! The degeneracy locus `c = 2 z₀(σ) √ω`: the integral function `F(z; σ)`,
//! its root `z₀`, the null vector `ξ` of `d''` and the orientation `d'''_ξ < 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functionals::{d_surface, d_third_directional, DSurface, ThirdDerivative};
use crate::grid::GridSpec;
use crate::par::Execution;
use crate::quadrature::{integrate_adaptive_rel, QuadratureError};
use crate::soliton::{fitted_grid, SolitonError, SolitonParams};

pub const Z_GUARD: f64 = 0.999;
pub const SCAN_STEP: f64 = 0.01;
pub const TAIL_EPS: f64 = 1e-16;
pub const QUAD_TOL: f64 = 1e-13;
/// Relative floor for the quadrature when the integrals are large (z near 1).
pub const QUAD_REL_TOL: f64 = 1e-14;
/// A null vector is rejected when `|λ_min| / |λ_max|` exceeds this.
pub const NULL_RATIO_MAX: f64 = 0.25;

#[derive(Debug, Error)]
pub enum DegeneracyError {
    #[error("z = {0} lies outside (-1, 1)")]
    ZOutOfRange(f64),
    #[error("sigma = {0} outside the admitted range")]
    SigmaOutOfRange(f64),
    #[error("F(z; {sigma}) has {count} sign changes on the scan grid (expected exactly one)")]
    SignChanges { sigma: f64, count: usize },
    #[error("root bracket touches the |z| <= {0} guard")]
    Guard(f64),
    #[error("Hessian is not near-degenerate: eigenvalues {0:e}, {1:e}")]
    NotDegenerate(f64, f64),
    #[error("|d3| = {value:e} is below the noise floor {floor:e}")]
    NoiseFloor { value: f64, floor: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Soliton(#[from] SolitonError),
}

/// Truncation point for the improper integrals in `F`.
pub fn y_max(sigma: f64) -> f64 {
    sigma * (2.0 / TAIL_EPS).ln() + sigma * (4.0 * sigma).ln() + 5.0
}

/// The two improper integrals `(A, B)` with `F = (σ−1)² A² − B²`.
pub fn f_parts(z: f64, sigma: f64) -> Result<(f64, f64), DegeneracyError> {
    f_parts_truncated(z, sigma, y_max(sigma))
}

pub fn f_parts_truncated(z: f64, sigma: f64, upper: f64) -> Result<(f64, f64), DegeneracyError> {
    if !(z > -1.0 && z < 1.0) {
        return Err(DegeneracyError::ZOutOfRange(z));
    }
    if !(sigma >= 1.0 && sigma < 2.0) {
        return Err(DegeneracyError::SigmaOutOfRange(sigma));
    }
    let p = 1.0 / sigma;
    // cosh y − z = (1 − z) + 2 sinh²(y/2) avoids cancellation near y = 0
    let base = move |y: f64| (1.0 - z) + 2.0 * (0.5 * y).sinh().powi(2);
    let a = integrate_adaptive_rel(|y| base(y).powf(-p), 0.0, upper, QUAD_TOL, QUAD_REL_TOL, 4000)?;
    let b = integrate_adaptive_rel(
        |y| base(y).powf(-p - 1.0) * (z * y.cosh() - 1.0),
        0.0,
        upper,
        QUAD_TOL,
        QUAD_REL_TOL,
        4000,
    )?;
    Ok((a.value, b.value))
}

/// `F(z; σ) = (σ−1)² [∫₀^∞ (cosh y − z)^{−1/σ}]² − [∫₀^∞ (cosh y − z)^{−1/σ−1}(z cosh y − 1)]²`
pub fn f_sigma(z: f64, sigma: f64) -> Result<f64, DegeneracyError> {
    let (a, b) = f_parts(z, sigma)?;
    Ok((sigma - 1.0).powi(2) * a * a - b * b)
}

/// Magnitude against which `|F(z₀)|` is judged.
pub fn f_scale(z: f64, sigma: f64) -> Result<f64, DegeneracyError> {
    let (a, b) = f_parts(z, sigma)?;
    Ok((sigma - 1.0).powi(2) * a * a + b * b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootOptions {
    pub scan_step: f64,
    pub xtol: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self { scan_step: SCAN_STEP, xtol: 1e-14 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Z0Row {
    pub sigma: f64,
    pub z0: f64,
    #[serde(rename = "F_residual")]
    pub f_residual: f64,
}

pub fn find_z0(sigma: f64) -> Result<f64, DegeneracyError> {
    find_z0_with(sigma, &RootOptions::default()).map(|r| r.z0)
}

/// Scan for the unique sign change of `F(·; σ)` then bisect it.
pub fn find_z0_with(sigma: f64, opts: &RootOptions) -> Result<Z0Row, DegeneracyError> {
    if !(sigma > 1.0 && sigma < 2.0) {
        return Err(DegeneracyError::SigmaOutOfRange(sigma));
    }
    let steps = (2.0 * Z_GUARD / opts.scan_step).round() as usize;
    let zs: Vec<f64> = (0..=steps)
        .map(|j| (-Z_GUARD + j as f64 * opts.scan_step).min(Z_GUARD))
        .collect();
    let fs: Vec<f64> = zs.iter().map(|&z| f_sigma(z, sigma)).collect::<Result<_, _>>()?;
    let changes: Vec<usize> = (0..fs.len() - 1).filter(|&j| fs[j] == 0.0 || fs[j] * fs[j + 1] < 0.0).collect();
    if changes.len() != 1 {
        return Err(DegeneracyError::SignChanges { sigma, count: changes.len() });
    }
    let j = changes[0];
    if fs[j] == 0.0 {
        return Ok(Z0Row { sigma, z0: zs[j], f_residual: 0.0 });
    }
    let (mut lo, mut hi, mut flo) = (zs[j], zs[j + 1], fs[j]);
    while hi - lo > opts.xtol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f_sigma(mid, sigma)?;
        if fm == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if fm * flo < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    let z0 = 0.5 * (lo + hi);
    if z0.abs() >= Z_GUARD {
        return Err(DegeneracyError::Guard(Z_GUARD));
    }
    Ok(Z0Row { sigma, z0, f_residual: f_sigma(z0, sigma)?.abs() })
}

/// `z₀(σ)` at each σ, evaluated independently.
pub fn z0_sweep(sigmas: &[f64], exec: Execution) -> Vec<Result<Z0Row, DegeneracyError>> {
    exec.map(sigmas, |&s| find_z0_with(s, &RootOptions::default()))
}

/// `σ ∈ [lo, hi]` at `count` evenly spaced points.
pub fn sigma_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count).map(|j| lo + (hi - lo) * j as f64 / (count - 1) as f64).collect()
}

/// Parameters on the degenerate curve `c = 2 z₀(σ) √ω`.
pub fn degenerate_params(sigma: f64, omega: f64) -> Result<SolitonParams, DegeneracyError> {
    let z0 = find_z0(sigma)?;
    Ok(SolitonParams::new(sigma, omega, 2.0 * z0 * omega.sqrt())?)
}

/// Unit eigenvector of the smallest-magnitude eigenvalue, first nonzero
/// component positive.
pub fn null_vector(h: [[f64; 2]; 2]) -> Result<[f64; 2], DegeneracyError> {
    let [[a, b], [_, c]] = h;
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mid - rad, mid + rad);
    let (small, big) = if l1.abs() <= l2.abs() { (l1, l2) } else { (l2, l1) };
    if small.abs() > NULL_RATIO_MAX * big.abs() {
        return Err(DegeneracyError::NotDegenerate(small, big));
    }
    // rows of (H − λI) annihilate the eigenvector; use the better-conditioned one
    let r1 = [a - small, b];
    let r2 = [b, c - small];
    let row = if r1[0].hypot(r1[1]) >= r2[0].hypot(r2[1]) { r1 } else { r2 };
    let mut v = if row[0] == 0.0 && row[1] == 0.0 { [1.0, 0.0] } else { [-row[1], row[0]] };
    let n = v[0].hypot(v[1]);
    v = [v[0] / n, v[1] / n];
    let lead = if v[0] != 0.0 { v[0] } else { v[1] };
    if lead < 0.0 {
        v = [-v[0], -v[1]];
    }
    Ok(v)
}

/// Flip `ξ` so that `d'''_ξ < 0`.
pub fn orient_xi(xi: [f64; 2], d3_probe: f64, noise_floor: f64) -> Result<([f64; 2], f64), DegeneracyError> {
    if !(d3_probe.abs() > noise_floor) {
        return Err(DegeneracyError::NoiseFloor { value: d3_probe.abs(), floor: noise_floor });
    }
    if d3_probe < 0.0 {
        Ok((xi, d3_probe))
    } else {
        Ok(([-xi[0], -xi[1]], -d3_probe))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegeneracyData {
    pub sigma: f64,
    pub omega: f64,
    pub z0: f64,
    pub c_star: f64,
    pub xi: [f64; 2],
    pub d3: f64,
    pub hessian_residual: f64,
    #[serde(rename = "F_residual")]
    pub f_residual: f64,
    pub surface: DSurface,
    pub third: ThirdDerivative,
}

impl DegeneracyData {
    pub fn params(&self) -> SolitonParams {
        SolitonParams { sigma: self.sigma, omega: self.omega, speed: self.c_star }
    }
}

/// Noise floor for certifying `d''' ≠ 0` from the gap between the two steps.
fn d3_noise(third: &ThirdDerivative) -> f64 {
    (third.at_h - third.at_half_h).abs().max(1e-8)
}

/// Locates `z₀`, builds `d''` at `c = 2z₀√ω`, extracts `ξ` and orients it.
pub fn degeneracy_data(sigma: f64, omega: f64, grid: &GridSpec, exec: Execution) -> Result<DegeneracyData, DegeneracyError> {
    let row = find_z0_with(sigma, &RootOptions::default())?;
    let params = SolitonParams::new(sigma, omega, 2.0 * row.z0 * omega.sqrt())?;
    let surface = d_surface(&params, grid, None, exec)?;
    let xi0 = null_vector(surface.hessian)?;
    let hv = [
        surface.hessian[0][0] * xi0[0] + surface.hessian[0][1] * xi0[1],
        surface.hessian[1][0] * xi0[0] + surface.hessian[1][1] * xi0[1],
    ];
    let hessian_residual = hv[0].hypot(hv[1]) / surface.hessian_norm();
    let probe = d_third_directional(&params, xi0, grid, None, exec)?;
    let (xi, d3) = orient_xi(xi0, probe.value, d3_noise(&probe))?;
    let third = if xi == xi0 {
        probe
    } else {
        ThirdDerivative {
            at_h: -probe.at_h,
            at_half_h: -probe.at_half_h,
            value: -probe.value,
            identity: -probe.identity,
            ..probe
        }
    };
    Ok(DegeneracyData {
        sigma,
        omega,
        z0: row.z0,
        c_star: params.speed,
        xi,
        d3,
        hessian_residual,
        f_residual: row.f_residual,
        surface,
        third,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetContrast {
    pub sigma: f64,
    pub z0: f64,
    pub det_star: f64,
    /// `None` when `z₀ − offset` leaves (−1, 1).
    pub det_minus: Option<f64>,
    pub det_plus: Option<f64>,
    pub length_star: f64,
}

impl DetContrast {
    /// Smallest of `|det(offset)| / |det(c*)|` over the admissible offsets.
    pub fn min_ratio(&self) -> f64 {
        [self.det_minus, self.det_plus]
            .into_iter()
            .flatten()
            .map(|d| d.abs() / self.det_star.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// `det d''` at `c = 2z₀√ω` and at `c = 2(z₀ ± offset)√ω`, each on a box wide
/// enough for its decay rate.
pub fn det_contrast(
    sigma: f64,
    omega: f64,
    offset: f64,
    base: &GridSpec,
    exec: Execution,
) -> Result<DetContrast, DegeneracyError> {
    let z0 = find_z0(sigma)?;
    let det_at = |z: f64| -> Result<(f64, f64), DegeneracyError> {
        let p = SolitonParams::new(sigma, omega, 2.0 * z * omega.sqrt())?;
        let g = fitted_grid(&p, base, 1e-2)?;
        Ok((d_surface(&p, &g, None, exec)?.det(), g.length()))
    };
    let side = |z: f64| -> Result<Option<f64>, DegeneracyError> {
        // the stencil needs some room inside the cone
        if z.abs() < 0.995 {
            Ok(Some(det_at(z)?.0))
        } else {
            Ok(None)
        }
    };
    let (det_star, length_star) = det_at(z0)?;
    Ok(DetContrast {
        sigma,
        z0,
        det_star,
        det_minus: side(z0 - offset)?,
        det_plus: side(z0 + offset)?,
        length_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_at_sigma_one_is_minus_one() {
        assert!((f_sigma(0.0, 1.0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(f_sigma(1.0, 1.5), Err(DegeneracyError::ZOutOfRange(_))));
        assert!(matches!(f_sigma(-1.2, 1.5), Err(DegeneracyError::ZOutOfRange(_))));
        assert!(matches!(f_sigma(0.0, 2.0), Err(DegeneracyError::SigmaOutOfRange(_))));
        assert!(find_z0(1.0).is_err());
    }

    #[test]
    fn truncation_certificate() {
        for &(z, s) in &[(0.0, 1.5), (0.9, 1.1), (-0.8, 1.9)] {
            let y = y_max(s);
            let (a1, b1) = f_parts_truncated(z, s, y).unwrap();
            let (a2, b2) = f_parts_truncated(z, s, 2.0 * y).unwrap();
            let f1 = (s - 1.0f64).powi(2) * a1 * a1 - b1 * b1;
            let f2 = (s - 1.0f64).powi(2) * a2 * a2 - b2 * b2;
            assert!((f1 - f2).abs() <= 1e-14 * f2.abs().max(f_scale(z, s).unwrap() * 1e-3), "{f1} {f2}");
        }
    }

    #[test]
    fn null_vector_cases() {
        assert_eq!(null_vector([[0.0, 0.0], [0.0, 5.0]]).unwrap(), [1.0, 0.0]);
        assert_eq!(null_vector([[3.0, 0.0], [0.0, 0.0]]).unwrap(), [0.0, 1.0]);
        let v = null_vector([[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!((v[0] + v[1]).abs() < 1e-15 && (v[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(null_vector([[1.0, 0.0], [0.0, 2.0]]), Err(DegeneracyError::NotDegenerate(..))));
    }

    #[test]
    fn orientation() {
        assert_eq!(orient_xi([0.6, 0.8], -2.0, 1e-6).unwrap(), ([0.6, 0.8], -2.0));
        assert_eq!(orient_xi([0.6, 0.8], 2.0, 1e-6).unwrap(), ([-0.6, -0.8], -2.0));
        assert!(orient_xi([0.6, 0.8], 1e-9, 1e-6).is_err());
    }

    #[test]
    fn sigma_grid_endpoints() {
        let g = sigma_grid(1.05, 1.95, 19);
        assert_eq!(g.len(), 19);
        assert!((g[1] - 1.10).abs() < 1e-15 && (g[18] - 1.95).abs() < 1e-15);
    }
}
