//! Effective tensors of the cell and frequency sweeps.
//!
//! `ε^eff = A^eff + πα²ε_w W` is frequency independent (`W` projects onto the
//! wire directions); `μ^eff(ω)` follows from the magnetic spectrum at
//! `q = ε_b k²`, `k = ω√(ε₀μ₀)`. Each sample is classified by the signs of
//! the eigenvalues of the real parts of both tensors.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::{GridError, PeriodicGrid};
use crate::electric_cell::{resonator_anchor, solve_electric_cell_on_mask, ElectricCellSolution, ElectricError};
use crate::geometry::{rasterize, CellGeometry, GeometryError, MaterialParams};
use crate::magnetic_cell::{
    build_constrained_space, mu_eff_spectral_guarded, solve_magnetic_spectrum, MagneticError, MagneticSpectrum,
    SpectrumOptions, POLE_GUARD,
};
use crate::solvers::LinearSolveOptions;
use crate::Tensor3;

#[derive(Debug, Error)]
pub enum EffectiveError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Electric(#[from] ElectricError),
    #[error(transparent)]
    Magnetic(#[from] MagneticError),
    #[error("tensors are not isotropic (relative deviation {deviation:.3e} from a scalar multiple of I)")]
    UnsupportedAnisotropic { deviation: f64 },
    #[error("invalid frequency grid: {0}")]
    InvalidFrequencyGrid(String),
}

/// `A^eff + πα²ε_w` on the diagonal entries of wire-carrying directions.
pub fn assemble_eps_eff(a_eff: &Tensor3, alpha: f64, eps_w: Complex64, wire_dirs: [bool; 3]) -> Tensor3 {
    let mut eps = *a_eff;
    let term = eps_w * (PI * alpha * alpha);
    for (axis, &present) in wire_dirs.iter().enumerate() {
        if present {
            eps[axis][axis] += term;
        }
    }
    eps
}

/// Ascending eigenvalues of the symmetric part of `Re T`.
pub fn real_part_eigenvalues(t: &Tensor3) -> [f64; 3] {
    symmetric_eigenvalues(|i, j| 0.5 * (t[i][j].re + t[j][i].re))
}

/// Ascending eigenvalues of the symmetric part of `Im T`.
pub fn imag_part_eigenvalues(t: &Tensor3) -> [f64; 3] {
    symmetric_eigenvalues(|i, j| 0.5 * (t[i][j].im + t[j][i].im))
}

fn symmetric_eigenvalues(f: impl Fn(usize, usize) -> f64) -> [f64; 3] {
    let m = Matrix3::from_fn(f);
    let mut e: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.total_cmp(b));
    [e[0], e[1], e[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandFlag {
    /// Both real parts positive definite.
    DoublePositive,
    /// Neither of the other cases: at least one real part is not positive definite.
    SingleNegative,
    /// Both real parts negative definite.
    DoubleNegative,
    /// `q` lies within the near-pole window of a bright eigenvalue.
    NearPole,
}

impl BandFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            BandFlag::DoublePositive => "double-positive",
            BandFlag::SingleNegative => "single-negative",
            BandFlag::DoubleNegative => "double-negative",
            BandFlag::NearPole => "near-pole",
        }
    }

    /// Classification from the eigenvalues of `Re μ` and `Re ε`.
    pub fn classify(eig_re_mu: &[f64; 3], eig_re_eps: &[f64; 3], near_pole: bool) -> BandFlag {
        if near_pole {
            return BandFlag::NearPole;
        }
        let pos = |e: &[f64; 3]| e.iter().all(|&v| v > 0.0);
        let neg = |e: &[f64; 3]| e.iter().all(|&v| v < 0.0);
        if pos(eig_re_mu) && pos(eig_re_eps) {
            BandFlag::DoublePositive
        } else if neg(eig_re_mu) && neg(eig_re_eps) {
            BandFlag::DoubleNegative
        } else {
            BandFlag::SingleNegative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyGrid {
    pub omega_min: f64,
    pub omega_max: f64,
    pub count: usize,
    #[serde(default = "linear")]
    pub spacing: Spacing,
}

fn linear() -> Spacing {
    Spacing::Linear
}

impl FrequencyGrid {
    pub fn validate(&self) -> Result<(), EffectiveError> {
        let bad = |m: &str| Err(EffectiveError::InvalidFrequencyGrid(m.into()));
        if self.count == 0 {
            return bad("count must be at least 1");
        }
        if !(self.omega_min.is_finite() && self.omega_max.is_finite()) || self.omega_min < 0.0 {
            return bad("frequencies must be finite and nonnegative");
        }
        if self.omega_max < self.omega_min {
            return bad("omega_max must not be below omega_min");
        }
        if self.spacing == Spacing::Log && self.omega_min <= 0.0 {
            return bad("log spacing needs omega_min > 0");
        }
        Ok(())
    }

    /// Sorted sample frequencies.
    pub fn samples(&self) -> Result<Vec<f64>, EffectiveError> {
        self.validate()?;
        if self.count == 1 {
            return Ok(vec![self.omega_min]);
        }
        let last = (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|i| {
                let t = i as f64 / last;
                match self.spacing {
                    Spacing::Linear => self.omega_min + t * (self.omega_max - self.omega_min),
                    Spacing::Log => self.omega_min * (self.omega_max / self.omega_min).powf(t),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    /// Relative window `|λₙ − q| < near_pole·λₙ` (bright modes) that flags a sample.
    pub near_pole: f64,
    /// Relative guard inside which the spectral sum is not evaluated (real `q`).
    pub pole_guard: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { near_pole: 1e-3, pole_guard: POLE_GUARD }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSample {
    pub omega: f64,
    pub k: f64,
    pub q: Complex64,
    /// `None` when `q` falls inside the pole guard.
    pub mu_eff: Option<Tensor3>,
    pub eig_re_mu: [f64; 3],
    pub eig_re_eps: [f64; 3],
    pub flag: BandFlag,
    pub truncation_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub eps_eff: Tensor3,
    pub samples: Vec<SweepSample>,
}

impl SweepResult {
    pub const CSV_COLUMNS: [&'static str; 47] = csv_columns();

    /// Samples flagged `flag`.
    pub fn count(&self, flag: BandFlag) -> usize {
        self.samples.iter().filter(|s| s.flag == flag).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::CSV_COLUMNS.join(",");
        out.push('\n');
        let eps = tensor_cells(Some(&self.eps_eff));
        for s in &self.samples {
            let mut row = vec![fmt(s.omega), fmt(s.k), fmt(s.q.re), fmt(s.q.im)];
            row.extend(tensor_cells(s.mu_eff.as_ref()));
            row.extend(eps.iter().cloned());
            row.extend(s.eig_re_mu.iter().map(|&v| fmt(v)));
            row.extend(s.eig_re_eps.iter().map(|&v| fmt(v)));
            row.push(s.flag.as_str().to_string());
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

const fn csv_columns() -> [&'static str; 47] {
    [
        "omega", "k", "q_re", "q_im", "mu_11_re", "mu_11_im", "mu_12_re", "mu_12_im", "mu_13_re", "mu_13_im",
        "mu_21_re", "mu_21_im", "mu_22_re", "mu_22_im", "mu_23_re", "mu_23_im", "mu_31_re", "mu_31_im", "mu_32_re",
        "mu_32_im", "mu_33_re", "mu_33_im", "eps_11_re", "eps_11_im", "eps_12_re", "eps_12_im", "eps_13_re",
        "eps_13_im", "eps_21_re", "eps_21_im", "eps_22_re", "eps_22_im", "eps_23_re", "eps_23_im", "eps_31_re",
        "eps_31_im", "eps_32_re", "eps_32_im", "eps_33_re", "eps_33_im", "eig_re_mu_1", "eig_re_mu_2",
        "eig_re_mu_3", "eig_re_eps_1", "eig_re_eps_2", "eig_re_eps_3", "flag",
    ]
}

/// Shortest round-trip representation; non-finite values print as `nan`.
fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        "nan".into()
    }
}

fn tensor_cells(t: Option<&Tensor3>) -> Vec<String> {
    let mut cells = Vec::with_capacity(18);
    for i in 0..3 {
        for j in 0..3 {
            match t {
                Some(t) => {
                    cells.push(fmt(t[i][j].re));
                    cells.push(fmt(t[i][j].im));
                }
                None => cells.extend(["nan".to_string(), "nan".to_string()]),
            }
        }
    }
    cells
}

/// Sweep `μ^eff` over `omegas` against a fixed `ε^eff`.
pub fn sweep_with(
    eps_eff: &Tensor3,
    spectrum: &MagneticSpectrum,
    materials: &MaterialParams,
    omegas: &[f64],
    opts: &SweepOptions,
) -> SweepResult {
    let eig_re_eps = real_part_eigenvalues(eps_eff);
    let bright: Vec<f64> = spectrum.modes.iter().filter(|m| m.bright).map(|m| m.lambda).collect();
    let mut samples: Vec<SweepSample> = omegas
        .par_iter()
        .map(|&omega| {
            let k = materials.wavenumber(omega);
            let q = materials.eps_b * (k * k);
            let near = bright.iter().any(|&l| (Complex64::new(l, 0.0) - q).norm() < opts.near_pole * l.abs());
            match mu_eff_spectral_guarded(spectrum, q, opts.pole_guard) {
                Ok(mu) => {
                    let eig_re_mu = real_part_eigenvalues(&mu.mu);
                    SweepSample {
                        omega,
                        k,
                        q,
                        mu_eff: Some(mu.mu),
                        eig_re_mu,
                        eig_re_eps,
                        flag: BandFlag::classify(&eig_re_mu, &eig_re_eps, near),
                        truncation_residual: mu.truncation_residual,
                    }
                }
                Err(_) => SweepSample {
                    omega,
                    k,
                    q,
                    mu_eff: None,
                    eig_re_mu: [f64::NAN; 3],
                    eig_re_eps,
                    flag: BandFlag::NearPole,
                    truncation_residual: f64::NAN,
                },
            }
        })
        .collect();
    samples.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    SweepResult { eps_eff: *eps_eff, samples }
}

/// Cell solutions needed by a sweep.
#[derive(Debug, Clone)]
pub struct EffectiveTensors {
    pub a_eff: Tensor3,
    pub eps_eff: Tensor3,
    pub wire_dirs: [bool; 3],
    pub spectrum: MagneticSpectrum,
    pub electric: ElectricCellSolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellOptions {
    pub linear: LinearSolveOptions,
    pub spectrum: SpectrumOptions,
}

/// Solve both cell problems on one rasterized resonator and assemble `ε^eff`.
pub fn compute_effective_tensors(
    geom: &CellGeometry,
    materials: &MaterialParams,
    grid: &PeriodicGrid,
    opts: &CellOptions,
) -> Result<EffectiveTensors, EffectiveError> {
    // the cell problems see only the resonator
    let bare = CellGeometry { wire_radius_alpha: 0.0, wires: vec![], ..geom.clone() };
    let mask = rasterize(&bare, grid.n())?;
    let resonator = mask.resonator();
    let electric = solve_electric_cell_on_mask(&resonator, resonator_anchor(&bare, &mask), grid, &opts.linear)?;
    let space = build_constrained_space(grid, &resonator)?;
    let spectrum = solve_magnetic_spectrum(&space, &opts.spectrum)?;
    let wire_dirs = geom.wire_axes();
    let eps_eff = assemble_eps_eff(&electric.a_eff, geom.wire_radius_alpha, materials.eps_w, wire_dirs);
    Ok(EffectiveTensors { a_eff: electric.a_eff, eps_eff, wire_dirs, spectrum, electric })
}

/// Full sweep: cell solves once, then `μ^eff` at every frequency.
pub fn sweep(
    geom: &CellGeometry,
    materials: &MaterialParams,
    grid: &PeriodicGrid,
    frequencies: &FrequencyGrid,
    cell: &CellOptions,
    opts: &SweepOptions,
) -> Result<(EffectiveTensors, SweepResult), EffectiveError> {
    let omegas = frequencies.samples()?;
    let tensors = compute_effective_tensors(geom, materials, grid, cell)?;
    let result = sweep_with(&tensors.eps_eff, &tensors.spectrum, materials, &omegas, opts);
    Ok((tensors, result))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DispersionReport {
    pub eps: Complex64,
    pub mu: Complex64,
    /// `εμ`, so that `k_eff² = ω²ε₀μ₀·εμ`.
    pub eps_mu: Complex64,
    pub propagating: bool,
}

/// Scalar value of a tensor within `1e-6` (relative) of `s·I`.
pub fn scalar_part(t: &Tensor3) -> Result<Complex64, EffectiveError> {
    let s = (t[0][0] + t[1][1] + t[2][2]) / 3.0;
    let mut dev = 0.0;
    let mut size = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = if i == j { t[i][j] - s } else { t[i][j] };
            dev += d.norm_sqr();
            size += t[i][j].norm_sqr();
        }
    }
    let deviation = if size > 0.0 { (dev / size).sqrt() } else { 0.0 };
    if deviation > 1e-6 {
        return Err(EffectiveError::UnsupportedAnisotropic { deviation });
    }
    Ok(s)
}

/// Plane-wave dispersion of an isotropic effective medium.
pub fn plane_wave_check(eps_eff: &Tensor3, mu_eff: &Tensor3) -> Result<DispersionReport, EffectiveError> {
    let eps = scalar_part(eps_eff)?;
    let mu = scalar_part(mu_eff)?;
    let eps_mu = eps * mu;
    Ok(DispersionReport { eps, mu, eps_mu, propagating: eps_mu.re > 0.0 })
}
