//! Solitary waves of the generalized derivative nonlinear Schrödinger equation
//! `i u_t + u_xx + i|u|^{2σ} u_x = 0`, with the modulation and Virial machinery
//! used to study their instability in the degenerate case `c = 2 z₀ √ω`.

pub mod grid;
pub mod par;
pub mod quadrature;
pub mod soliton;
pub mod functionals;
pub mod degeneracy;
pub mod modulation;
pub mod dynamics;
pub mod sampling;
pub mod acceptance;
pub mod cli;
