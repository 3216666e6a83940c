//! Uniform periodic grid standing in for the real line, sampled complex fields,
//! and the spectral calculus used by every other module.
//!
//! All integrals are periodic trapezoid sums `dx * Σ`, and the real pairing is
//! `⟨u, v⟩ = Re ∫ u v̄ dx`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Relative tolerance on node spacing when reading a field file.
pub const SPACING_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid count {0} must be a power of two and at least 16")]
    BadCount(usize),
    #[error("grid length {0} must be positive and finite")]
    BadLength(f64),
    #[error("field has {got} samples but grid has {expected}")]
    SampleCount { expected: usize, got: usize },
    #[error("field contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("field file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    length: f64,
    count: usize,
}

impl GridSpec {
    pub fn new(length: f64, count: usize) -> Result<Self, GridError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(GridError::BadLength(length));
        }
        if count < 16 || !count.is_power_of_two() {
            return Err(GridError::BadCount(count));
        }
        Ok(Self { length, count })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dx(&self) -> f64 {
        self.length / self.count as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        -0.5 * self.length + j as f64 * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.node(j)).collect()
    }

    /// Angular wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.count as i64;
        let base = 2.0 * std::f64::consts::PI / self.length;
        (0..n)
            .map(|j| if j <= n / 2 { j } else { j - n })
            .map(|m| base * m as f64)
            .collect()
    }

    /// Derivative multipliers `ik` with the Nyquist mode zeroed.
    pub fn derivative_symbols(&self) -> Vec<Complex64> {
        let nyq = self.count / 2;
        self.wavenumbers()
            .into_iter()
            .enumerate()
            .map(|(j, k)| if j == nyq { Complex64::new(0.0, 0.0) } else { Complex64::new(0.0, k) })
            .collect()
    }

    /// Smallest power-of-two grid with spacing at most `max_dx` on a box of `length`.
    pub fn with_max_spacing(length: f64, max_dx: f64) -> Result<Self, GridError> {
        let mut count = 16usize;
        while length / (count as f64) > max_dx * (1.0 + 1e-12) {
            count *= 2;
        }
        Self::new(length, count)
    }
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    type Cache = Mutex<HashMap<usize, (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
        })
        .clone()
}

/// In-place unnormalized forward DFT.
pub fn fft_forward(data: &mut [Complex64]) {
    let (fwd, _) = plans(data.len());
    fwd.process(data);
}

/// In-place inverse DFT, normalized so that `inverse(forward(x)) == x`.
pub fn fft_inverse(data: &mut [Complex64]) {
    let (_, inv) = plans(data.len());
    inv.process(data);
    let scale = 1.0 / data.len() as f64;
    data.iter_mut().for_each(|z| *z *= scale);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    grid: GridSpec,
    samples: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(grid: GridSpec, samples: Vec<Complex64>) -> Result<Self, GridError> {
        if samples.len() != grid.count() {
            return Err(GridError::SampleCount { expected: grid.count(), got: samples.len() });
        }
        if let Some(j) = samples.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(GridError::NonFinite(j));
        }
        Ok(Self { grid, samples })
    }

    /// Builds a field without the finiteness scan; callers guarantee the length.
    pub(crate) fn from_vec(grid: GridSpec, samples: Vec<Complex64>) -> Self {
        debug_assert_eq!(samples.len(), grid.count());
        Self { grid, samples }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::from_vec(grid, vec![Complex64::new(0.0, 0.0); grid.count()])
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64) -> Complex64) -> Self {
        Self::from_vec(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn from_real(grid: GridSpec, values: &[f64]) -> Self {
        Self::from_vec(grid, values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Complex64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn same_grid(&self, other: &ComplexField) -> bool {
        self.grid == other.grid
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self::from_vec(self.grid, self.samples.iter().map(|&z| f(z)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Self {
        assert!(self.same_grid(other), "fields live on different grids");
        Self::from_vec(
            self.grid,
            self.samples.iter().zip(&other.samples).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn scale_c(&self, s: Complex64) -> Self {
        self.map(|z| z * s)
    }

    pub fn times_i(&self) -> Self {
        self.map(|z| z * I)
    }

    pub fn conj(&self) -> Self {
        self.map(|z| z.conj())
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b * s)
    }

    pub fn modulus(&self) -> Vec<f64> {
        self.samples.iter().map(|z| z.norm()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Pairing with another field on the same grid; panics on mismatch.
    pub fn inner(&self, other: &Self) -> f64 {
        assert!(self.same_grid(other), "fields live on different grids");
        pair_unchecked(self, other)
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn spectrum(&self) -> Vec<Complex64> {
        let mut buf = self.samples.clone();
        fft_forward(&mut buf);
        buf
    }

    pub fn from_spectrum(grid: GridSpec, mut spec: Vec<Complex64>) -> Self {
        fft_inverse(&mut spec);
        Self::from_vec(grid, spec)
    }

    /// Cyclic shift by a whole number of cells: result(x_j) = self(x_{j+cells}).
    pub fn roll(&self, cells: isize) -> Self {
        let n = self.samples.len() as isize;
        let samples = (0..n)
            .map(|j| self.samples[(j + cells).rem_euclid(n) as usize])
            .collect();
        Self::from_vec(self.grid, samples)
    }
}

impl Add for &ComplexField {
    type Output = ComplexField;
    fn add(self, rhs: &ComplexField) -> ComplexField {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &ComplexField {
    type Output = ComplexField;
    fn sub(self, rhs: &ComplexField) -> ComplexField {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Neg for &ComplexField {
    type Output = ComplexField;
    fn neg(self) -> ComplexField {
        self.map(|z| -z)
    }
}

impl Mul<f64> for &ComplexField {
    type Output = ComplexField;
    fn mul(self, rhs: f64) -> ComplexField {
        self.scale(rhs)
    }
}

fn pair_unchecked(u: &ComplexField, v: &ComplexField) -> f64 {
    let s: f64 = u
        .samples
        .iter()
        .zip(&v.samples)
        .map(|(a, b)| a.re * b.re + a.im * b.im)
        .sum();
    s * u.grid.dx()
}

fn apply_symbol(f: &ComplexField, symbol: impl Fn(usize) -> Complex64) -> ComplexField {
    let mut spec = f.spectrum();
    spec.iter_mut().enumerate().for_each(|(j, z)| *z *= symbol(j));
    ComplexField::from_spectrum(*f.grid(), spec)
}

/// Fourier-multiplier derivative, Nyquist mode zeroed.
pub fn spectral_derivative(f: &ComplexField) -> ComplexField {
    let sym = f.grid().derivative_symbols();
    apply_symbol(f, |j| sym[j])
}

/// Second derivative as the square of the first-derivative multiplier.
pub fn spectral_second_derivative(f: &ComplexField) -> ComplexField {
    let sym = f.grid().derivative_symbols();
    apply_symbol(f, |j| sym[j] * sym[j])
}

/// Periodic trapezoid rule `dx * Σ f_j`.
pub fn integrate(f: &ComplexField) -> Complex64 {
    f.samples().iter().sum::<Complex64>() * f.grid().dx()
}

pub fn integrate_real(values: &[f64], grid: &GridSpec) -> f64 {
    values.iter().sum::<f64>() * grid.dx()
}

/// ⟨u, v⟩ = Re ∫ u v̄ dx.
pub fn pairing(u: &ComplexField, v: &ComplexField) -> Result<f64, GridError> {
    if !u.same_grid(v) {
        return Err(GridError::GridMismatch);
    }
    Ok(pair_unchecked(u, v))
}

pub fn h1_norm_sq(u: &ComplexField) -> f64 {
    let ux = spectral_derivative(u);
    u.inner(u) + ux.inner(&ux)
}

/// √(∫|u|² + |u_x|²) with the spectral derivative.
pub fn h1_norm(u: &ComplexField) -> f64 {
    h1_norm_sq(u).sqrt()
}

/// H¹ inner product Re ∫ (u v̄ + u_x v̄_x).
pub fn h1_inner(u: &ComplexField, v: &ComplexField) -> f64 {
    u.inner(v) + spectral_derivative(u).inner(&spectral_derivative(v))
}

/// Band-limited translation: returns x ↦ f(x + y) for any real y.
pub fn fourier_shift(f: &ComplexField, y: f64) -> ComplexField {
    let k = f.grid().wavenumbers();
    let nyq = f.grid().count() / 2;
    apply_symbol(f, |j| {
        if j == nyq {
            // keep the Nyquist mode real-symmetric: cos(k y)
            Complex64::new((k[j] * y).cos(), 0.0)
        } else {
            Complex64::from_polar(1.0, k[j] * y)
        }
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldRow {
    x: f64,
    re: f64,
    im: f64,
}

/// Writes the `x,re,im` field CSV.
pub fn write_field_csv<W: Write>(field: &ComplexField, writer: W) -> Result<(), GridError> {
    let mut w = csv::Writer::from_writer(writer);
    for (x, z) in field.grid().nodes().into_iter().zip(field.samples()) {
        w.serialize(FieldRow { x, re: z.re, im: z.im })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `x,re,im` field CSV, recovering the grid from the node column.
pub fn read_field_csv<R: Read>(reader: R) -> Result<ComplexField, GridError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "re", "im"] {
        return Err(GridError::Format(format!("expected header x,re,im, got {:?}", headers)));
    }
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for row in r.deserialize() {
        let row: FieldRow = row?;
        xs.push(row.x);
        zs.push(Complex64::new(row.re, row.im));
    }
    if xs.len() < 2 {
        return Err(GridError::Format("need at least two rows".into()));
    }
    let n = xs.len();
    let dx = (xs[n - 1] - xs[0]) / (n - 1) as f64;
    if !(dx > 0.0) {
        return Err(GridError::Format("nodes must be strictly increasing".into()));
    }
    for (j, w) in xs.windows(2).enumerate() {
        let step = w[1] - w[0];
        if ((step - dx) / dx).abs() > SPACING_TOL.max(4.0 * f64::EPSILON * (w[1].abs() / dx)) {
            return Err(GridError::Format(format!("non-uniform spacing at row {}", j + 1)));
        }
    }
    let grid = GridSpec::new(dx * n as f64, n)?;
    if ((xs[0] - grid.node(0)) / dx).abs() > 1e-6 {
        return Err(GridError::Format(format!(
            "first node {} does not match the centred grid origin {}",
            xs[0],
            grid.node(0)
        )));
    }
    ComplexField::new(grid, zs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(l: f64, n: usize) -> GridSpec {
        GridSpec::new(l, n).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(10.0, 8).is_err());
        assert!(GridSpec::new(10.0, 100).is_err());
        assert!(GridSpec::new(-1.0, 64).is_err());
        let g = grid(10.0, 64);
        assert!((g.dx() - 10.0 / 64.0).abs() < 1e-15);
        assert_eq!(g.node(0), -5.0);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn derivative_of_fourier_mode_is_exact() {
        let g = grid(2.0 * PI, 64);
        let k = 5.0;
        let f = ComplexField::from_fn(g, |x| Complex64::from_polar(1.0, k * x));
        let d = spectral_derivative(&f);
        for (x, z) in g.nodes().into_iter().zip(d.samples()) {
            let expect = I * k * Complex64::from_polar(1.0, k * x);
            assert!((z - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let g = grid(7.0, 32);
        let f = ComplexField::from_fn(g, |_| Complex64::new(3.0, -2.0));
        assert!(spectral_derivative(&f).max_abs() < 1e-13);
    }

    #[test]
    fn gaussian_derivative() {
        let g = grid(40.0, 1024);
        let f = ComplexField::from_fn(g, |x| Complex64::new((-x * x).exp(), 0.0));
        let d = spectral_derivative(&f);
        let exact = ComplexField::from_fn(g, |x| Complex64::new(-2.0 * x * (-x * x).exp(), 0.0));
        let err = (&d - &exact).l2_norm() / exact.l2_norm();
        assert!(err < 1e-12, "rel err {err}");
    }

    #[test]
    fn quadrature_cases() {
        let g = grid(12.0, 64);
        let one = ComplexField::from_fn(g, |_| Complex64::new(1.0, 0.0));
        assert!((integrate(&one).re - 12.0).abs() < 1e-12);
        let s = ComplexField::from_fn(g, |x| Complex64::new((2.0 * PI * x / 12.0).sin(), 0.0));
        assert!(integrate(&s).norm() < 1e-14);
        let g = grid(80.0, 2048);
        let sech = ComplexField::from_fn(g, |x| Complex64::new(1.0 / x.cosh(), 0.0));
        assert!((integrate(&sech).re - PI).abs() < 1e-12);
    }

    #[test]
    fn pairing_basics() {
        let g = grid(20.0, 256);
        let f = ComplexField::from_fn(g, |x| Complex64::new((-x * x).exp(), x.sin() * (-x * x / 4.0).exp()));
        assert!(pairing(&f, &f).unwrap() > 0.0);
        assert!(pairing(&f.times_i(), &f).unwrap().abs() < 1e-15);
        let other = ComplexField::zeros(grid(20.0, 128));
        assert!(matches!(pairing(&f, &other), Err(GridError::GridMismatch)));
    }

    #[test]
    fn h1_norm_cases() {
        let g = grid(10.0, 64);
        assert_eq!(h1_norm(&ComplexField::zeros(g)), 0.0);
        let c = ComplexField::from_fn(g, |_| Complex64::new(0.6, 0.8));
        assert!((h1_norm(&c) - 10f64.sqrt()).abs() < 1e-13);
        let g = grid(80.0, 2048);
        let sech = ComplexField::from_fn(g, |x| Complex64::new(1.0 / x.cosh(), 0.0));
        assert!((h1_norm(&sech) - (2.0f64 + 2.0 / 3.0).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn shift_matches_translate() {
        let g = grid(40.0, 512);
        let f = ComplexField::from_fn(g, |x| Complex64::new((-(x - 1.0).powi(2)).exp(), 0.3 * (-x * x).exp()));
        let y = 0.37;
        let shifted = fourier_shift(&f, y);
        let exact = ComplexField::from_fn(g, |x| {
            let x = x + y;
            Complex64::new((-(x - 1.0).powi(2)).exp(), 0.3 * (-x * x).exp())
        });
        assert!((&shifted - &exact).max_abs() < 1e-13);
        let back = fourier_shift(&shifted, -y);
        assert!((&back - &f).max_abs() < 1e-13);
        let rolled = f.roll(3);
        let by_shift = fourier_shift(&f, 3.0 * g.dx());
        assert!((&rolled - &by_shift).max_abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let g = grid(16.0, 32);
        let f = ComplexField::from_fn(g, |x| Complex64::new(x.cos(), x.sin()));
        let mut buf = Vec::new();
        write_field_csv(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,re,im\n"));
        let back = read_field_csv(buf.as_slice()).unwrap();
        assert_eq!(back.grid(), &g);
        assert!((&back - &f).max_abs() < 1e-15);

        let bad = "x,re,im\n-1,0,0\n-0.5,0,0\n0.1,0,0\n0.5,0,0\n";
        assert!(read_field_csv(bad.as_bytes()).is_err());
        let bad_header = "a,b,c\n0,0,0\n1,0,0\n";
        assert!(read_field_csv(bad_header.as_bytes()).is_err());
    }
}
