//! Homogenization of periodic metamaterial cells containing a dielectric
//! resonator and thin metallic wires.
//!
//! The crate computes the effective permittivity `ε^eff = A^eff + πα²ε_w W`
//! and the frequency-dependent effective permeability `μ^eff(ω)` of a cell
//! on a staggered periodic grid, sweeps frequency, and classifies bands by
//! the signs of the real parts of both tensors.

use num_complex::Complex64;

pub mod cli;
pub mod config;
pub mod discretization;
pub mod effective_medium;
pub mod electric_cell;
pub mod geometry;
pub mod magnetic_cell;
pub mod solvers;
pub mod validation;

/// Complex 3×3 tensor, row-major.
pub type Tensor3 = [[Complex64; 3]; 3];

pub fn identity_tensor() -> Tensor3 {
    let mut t = [[Complex64::default(); 3]; 3];
    for (i, row) in t.iter_mut().enumerate() {
        row[i] = Complex64::new(1.0, 0.0);
    }
    t
}

/// Frobenius norm of `a − b` relative to that of `b`.
pub fn tensor_relative_difference(a: &Tensor3, b: &Tensor3) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            num += (a[i][j] - b[i][j]).norm_sqr();
            den += b[i][j].norm_sqr();
        }
    }
    (num / den).sqrt()
}
