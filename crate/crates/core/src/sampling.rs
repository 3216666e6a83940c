//! Seeded random test fields.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{h1_norm, ComplexField, GridSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sum of `packets` Gaussian wave packets centred in the middle half of the box
/// (at most 10 from the origin), normalized to unit H¹ norm.
pub fn random_packets(grid: GridSpec, rng: &mut impl Rng, packets: usize) -> ComplexField {
    random_packets_within(grid, rng, packets, (0.25 * grid.length()).min(10.0))
}

/// As [`random_packets`] with centres drawn from `[−half_width, half_width]`.
pub fn random_packets_within(grid: GridSpec, rng: &mut impl Rng, packets: usize, half_width: f64) -> ComplexField {
    let params: Vec<(f64, f64, f64, Complex64)> = (0..packets)
        .map(|_| {
            let x0 = rng.gen_range(-half_width..=half_width);
            let w = rng.gen_range(0.5..3.0);
            let k = rng.gen_range(-3.0..3.0);
            let a = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            (x0, w, k, a)
        })
        .collect();
    let f = ComplexField::from_fn(grid, |x| {
        params
            .iter()
            .map(|&(x0, w, k, a)| a * (-(x - x0) * (x - x0) / (w * w)).exp() * Complex64::from_polar(1.0, k * x))
            .sum()
    });
    let n = h1_norm(&f);
    if n > 0.0 {
        f.scale(1.0 / n)
    } else {
        f
    }
}
