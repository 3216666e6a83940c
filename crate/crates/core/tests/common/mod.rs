#![allow(dead_code)]

use std::sync::OnceLock;

use gdnls::degeneracy::degeneracy_data;
use gdnls::grid::{ComplexField, GridSpec};
use gdnls::modulation::renormalize_tangent;
use gdnls::par::Execution;
use gdnls::soliton::{build_profile, tangent_vector, SolitonProfile};

pub struct Degenerate {
    pub profile: SolitonProfile,
    pub phi: ComplexField,
    pub xi: [f64; 2],
    pub d3: f64,
}

/// Degenerate soliton at (σ, ω) = (1.5, 1) on a 60 / 1024 box.
pub fn degenerate() -> &'static Degenerate {
    static CELL: OnceLock<Degenerate> = OnceLock::new();
    CELL.get_or_init(|| {
        let g = GridSpec::new(60.0, 1024).unwrap();
        let data = degeneracy_data(1.5, 1.0, &g, Execution::Parallel).unwrap();
        let profile = build_profile(&data.params(), &g).unwrap();
        let tilde = tangent_vector(&profile, data.xi, None).unwrap();
        let phi = renormalize_tangent(&profile, &tilde, data.xi).unwrap().phi;
        Degenerate { profile, phi, xi: data.xi, d3: data.d3 }
    })
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
