//! Electric cell problem: for each direction `j` a periodic potential `Θ^j`
//! that is harmonic outside the resonator and equals `-y_j` inside it,
//! the curl-free field `E^j = ∇Θ^j + e_j` (which vanishes inside the
//! resonator and has unit mean `e_j`) and the tensor `A_ij = ∫ E^i·E^j`.
//!
//! The same machinery solves the shrinking-wire potentials `Θ^j_η`, which
//! additionally hold `-y_j` on the wires `i ≠ j` and `0` on wire `j`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::discretization::{
    build_grad, build_neg_laplacian, dot, integrate_edges, wrap_offset, PeriodicGrid, PeriodicPoisson,
    SparseOperator,
};
use crate::geometry::{rasterize, rasterize_with_wire_radius, CellGeometry, GeometryError, Label, Shape, VoxelMask};
use crate::solvers::{
    pcg_solve, CgReport, IdentityPreconditioner, JacobiPreconditioner, LinearOperator, LinearSolveOptions,
    Preconditioner, PreconditionerKind, SolverError,
};
use crate::Tensor3;

#[derive(Debug, Error)]
pub enum ElectricError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("resonator covers the whole cell: no exterior nodes")]
    NoExterior,
    #[error("grid resolution {grid} does not match mask resolution {mask}")]
    ResolutionMismatch { grid: usize, mask: usize },
    #[error("potential for direction {direction}: {source}")]
    Solver { direction: usize, source: SolverError },
}

/// Dirichlet-constrained nodal Laplacian: rows and columns of the
/// constrained nodes are eliminated. Vectors keep full length and are zero
/// on constrained nodes.
pub(crate) struct MaskedLaplacian<'a> {
    pub laplacian: &'a SparseOperator,
    pub free: &'a [bool],
}

impl LinearOperator<f64> for MaskedLaplacian<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.laplacian.apply(x, y);
        y.par_iter_mut().zip(self.free.par_iter()).for_each(|(v, &f)| {
            if !f {
                *v = 0.0
            }
        });
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.laplacian.diagonal())
    }
}

/// `mask · (−Δ_h + σ₁Π₀)⁻¹ · mask` via FFT, `Π₀` the projector on constants.
pub(crate) struct MaskedPoissonPreconditioner<'a> {
    pub poisson: &'a PeriodicPoisson,
    pub free: &'a [bool],
}

impl Preconditioner<f64> for MaskedPoissonPreconditioner<'_> {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        let floor = self.poisson.smallest_nonzero();
        self.poisson.apply_symbol_real(z, |s| 1.0 / s.max(floor));
        z.iter_mut().zip(self.free).for_each(|(v, &f)| {
            if !f {
                *v = 0.0
            }
        });
    }
}

/// Per-direction Dirichlet data: `None` marks a free node.
struct DirichletProblem {
    values: [Vec<Option<f64>>; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveStats {
    pub iterations: [usize; 3],
    pub relative_residual: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct ElectricCellSolution {
    pub grid: PeriodicGrid,
    /// Chart origin of the affine data inside the resonator.
    pub anchor: [f64; 3],
    pub resonator: Vec<bool>,
    pub theta: [Vec<f64>; 3],
    /// Edge fields `E^j = GΘ^j + e_j`.
    pub e_fields: [Vec<f64>; 3],
    pub a_eff: Tensor3,
    pub stats: SolveStats,
    pub reports: Vec<CgReport>,
}

#[derive(Debug, Clone)]
pub struct ThetaEtaSolution {
    pub eta: f64,
    pub wire_radius: f64,
    pub labels: VoxelMask,
    pub theta_eta: [Vec<f64>; 3],
    pub vth_eta: [Vec<f64>; 3],
    pub stats: SolveStats,
}

/// Chart origin for a resonator: the centre of analytic shapes, otherwise
/// the midpoint of the bounding box of the resonator voxels.
pub fn resonator_anchor(geom: &CellGeometry, mask: &VoxelMask) -> [f64; 3] {
    match &geom.resonator {
        Some(Shape::Ball { center, .. }) | Some(Shape::Box { center, .. }) => *center,
        _ => {
            let n = mask.n();
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for (p, &l) in mask.labels().iter().enumerate() {
                if l == Label::Resonator {
                    let c = [p % n, (p / n) % n, p / (n * n)];
                    for a in 0..3 {
                        lo[a] = lo[a].min(c[a]);
                        hi[a] = hi[a].max(c[a]);
                    }
                }
            }
            if lo[0] == usize::MAX {
                return [0.5; 3];
            }
            [0, 1, 2].map(|a| (lo[a] + hi[a] + 1) as f64 * 0.5 / n as f64)
        }
    }
}

fn solve_dirichlet(
    grid: &PeriodicGrid,
    problem: &DirichletProblem,
    opts: &LinearSolveOptions,
) -> Result<([Vec<f64>; 3], Vec<CgReport>), ElectricError> {
    let lap = build_neg_laplacian(grid);
    let poisson = PeriodicPoisson::new(grid);
    let results: Vec<Result<(Vec<f64>, CgReport), ElectricError>> = (0..3)
        .into_par_iter()
        .map(|j| {
            let data = &problem.values[j];
            let free: Vec<bool> = data.iter().map(|v| v.is_none()).collect();
            let dirichlet: Vec<f64> = data.iter().map(|v| v.unwrap_or(0.0)).collect();
            if free.iter().all(|&f| f) {
                // unconstrained: constant potential
                return Ok((vec![0.0; grid.num_nodes()], CgReport::default()));
            }
            if free.iter().all(|&f| !f) {
                return Ok((dirichlet, CgReport::default()));
            }
            let mut rhs = lap.mul_vec(&dirichlet);
            rhs.iter_mut().zip(&free).for_each(|(v, &f)| *v = if f { -*v } else { 0.0 });
            let op = MaskedLaplacian { laplacian: &lap, free: &free };
            let sol = match opts.preconditioner {
                PreconditionerKind::None => pcg_solve(&op, &rhs, None, &IdentityPreconditioner, opts),
                PreconditionerKind::Diagonal => {
                    pcg_solve(&op, &rhs, None, &JacobiPreconditioner::new(&lap.diagonal()), opts)
                }
                PreconditionerKind::PeriodicPoisson => pcg_solve(
                    &op,
                    &rhs,
                    None,
                    &MaskedPoissonPreconditioner { poisson: &poisson, free: &free },
                    opts,
                ),
            }
            .map_err(|source| ElectricError::Solver { direction: j + 1, source })?;
            let theta: Vec<f64> = sol.x.iter().zip(&dirichlet).map(|(x, d)| x + d).collect();
            Ok((theta, sol.report))
        })
        .collect();
    let mut thetas = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);
    for r in results {
        let (t, rep) = r?;
        thetas.push(t);
        reports.push(rep);
    }
    let thetas: [Vec<f64>; 3] = thetas.try_into().expect("three directions");
    Ok((thetas, reports))
}

/// `GΘ + e_j` on edges.
fn corrector_field(grad: &SparseOperator, grid: &PeriodicGrid, theta: &[f64], j: usize) -> Vec<f64> {
    let mut e = grad.mul_vec(theta);
    let nn = grid.num_nodes();
    e[j * nn..(j + 1) * nn].iter_mut().for_each(|v| *v += 1.0);
    e
}

fn stats(reports: &[CgReport]) -> SolveStats {
    SolveStats {
        iterations: [0, 1, 2].map(|j| reports[j].iterations),
        relative_residual: [0, 1, 2].map(|j| reports[j].relative_residual),
    }
}

/// Solve the three electric cell problems on the rasterized resonator
/// (wires play no role here).
pub fn solve_electric_cell(
    geom: &CellGeometry,
    grid: &PeriodicGrid,
    opts: &LinearSolveOptions,
) -> Result<ElectricCellSolution, ElectricError> {
    let mask = rasterize(&CellGeometry { wire_radius_alpha: 0.0, wires: vec![], ..geom.clone() }, grid.n())?;
    let anchor = resonator_anchor(geom, &mask);
    solve_electric_cell_on_mask(&mask.resonator(), anchor, grid, opts)
}

pub fn solve_electric_cell_on_mask(
    resonator: &[bool],
    anchor: [f64; 3],
    grid: &PeriodicGrid,
    opts: &LinearSolveOptions,
) -> Result<ElectricCellSolution, ElectricError> {
    if resonator.len() != grid.num_nodes() {
        return Err(ElectricError::ResolutionMismatch {
            grid: grid.n(),
            mask: (resonator.len() as f64).cbrt().round() as usize,
        });
    }
    if resonator.iter().all(|&r| r) {
        return Err(ElectricError::NoExterior);
    }
    let grad = build_grad(grid);
    let nn = grid.num_nodes();
    let empty = !resonator.iter().any(|&r| r);
    let (theta, reports) = if empty {
        let zero = vec![0.0; nn];
        ([zero.clone(), zero.clone(), zero], vec![CgReport::default(); 3])
    } else {
        let values = [0, 1, 2].map(|j| {
            (0..nn)
                .map(|p| resonator[p].then(|| -wrap_offset(grid.node_position(p)[j], anchor[j])))
                .collect()
        });
        solve_dirichlet(grid, &DirichletProblem { values }, opts)?
    };
    let e_fields = [0, 1, 2].map(|j| corrector_field(&grad, grid, &theta[j], j));
    let a_eff = if empty { crate::identity_tensor() } else { tensor_from_fields(grid, &e_fields) };
    Ok(ElectricCellSolution {
        grid: *grid,
        anchor,
        resonator: resonator.to_vec(),
        stats: stats(&reports),
        theta,
        e_fields,
        a_eff,
        reports,
    })
}

/// `A_ij = h³ Σ_edges E^i E^j` (no conjugation; the fields are real).
pub fn tensor_from_fields(grid: &PeriodicGrid, e: &[Vec<f64>; 3]) -> Tensor3 {
    let w = grid.cell_volume();
    let mut a = [[Complex64::default(); 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = Complex64::new(w * dot(&e[i], &e[j]), 0.0);
            a[i][j] = v;
            a[j][i] = v;
        }
    }
    a
}

/// `∫|∇Θ|²` with the edge quadrature.
pub fn dirichlet_energy(grid: &PeriodicGrid, theta: &[f64]) -> f64 {
    let g = build_grad(grid).mul_vec(theta);
    grid.cell_volume() * dot(&g, &g)
}

impl ElectricCellSolution {
    /// `∫ E^j` per direction.
    pub fn means(&self) -> [[f64; 3]; 3] {
        [0, 1, 2].map(|j| integrate_edges(&self.grid, &self.e_fields[j]).expect("edge field"))
    }

    /// `A_jj` recomputed as `1 + ∫|∇Θ^j|²`.
    pub fn energy_diagonal(&self) -> [f64; 3] {
        [0, 1, 2].map(|j| 1.0 + dirichlet_energy(&self.grid, &self.theta[j]))
    }

    /// `A` recomputed from the polarization of the resonator,
    /// `δ_ij + h³ Σ_{p∈Σ} (div E^i)_p (y_p − c)_j`.
    pub fn polarization_tensor(&self) -> [[f64; 3]; 3] {
        let div = crate::discretization::build_div(&self.grid);
        let w = self.grid.cell_volume();
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            let d = div.mul_vec(&self.e_fields[i]);
            for j in 0..3 {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for (p, &r) in self.resonator.iter().enumerate() {
                    if r {
                        s += w * d[p] * wrap_offset(self.grid.node_position(p)[j], self.anchor[j]);
                    }
                }
                a[i][j] = s;
            }
        }
        a
    }

    /// Largest `|E^j|` on edges whose two end nodes lie in the resonator.
    pub fn max_interior_field(&self) -> f64 {
        let nn = self.grid.num_nodes();
        let mut m = 0.0f64;
        for e in &self.e_fields {
            for (idx, v) in e.iter().enumerate() {
                let axis = idx / nn;
                let p = idx % nn;
                if self.resonator[p] && self.resonator[self.grid.step(p, axis, true)] {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }

    /// Largest `|curl E^j|` over all faces.
    pub fn max_curl(&self) -> f64 {
        let curl = crate::discretization::build_curl(&self.grid);
        self.e_fields
            .iter()
            .map(|e| curl.mul_vec(e).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max)
    }
}

/// Shrinking-wire potentials: wires of radius `αη` inside the cell,
/// `Θ^j_η = -y_j` on the resonator and on wires `i ≠ j`, `Θ^j_η = 0` on
/// wire `j`, harmonic elsewhere. Coordinates `y` are taken in one fixed
/// chart of the cell around the resonator and each wire axis.
pub fn solve_theta_eta(
    geom: &CellGeometry,
    grid: &PeriodicGrid,
    eta: f64,
    opts: &LinearSolveOptions,
) -> Result<ThetaEtaSolution, ElectricError> {
    let radius = geom.wire_radius_alpha * eta;
    let labels = rasterize_with_wire_radius(geom, grid.n(), radius)?;
    let resonator_only = rasterize(&CellGeometry { wire_radius_alpha: 0.0, wires: vec![], ..geom.clone() }, grid.n())?;
    let anchor = resonator_anchor(geom, &resonator_only);
    let nn = grid.num_nodes();
    if labels.labels().iter().all(|&l| l != Label::Exterior) {
        return Err(ElectricError::NoExterior);
    }
    let wire_coord = |axis: usize, j: usize| -> Option<f64> {
        geom.wires.iter().find(|w| w.axis() == axis).map(|w| w.coordinate(j))
    };
    let values = [0, 1, 2].map(|j| {
        (0..nn)
            .map(|p| {
                let y = grid.node_position(p)[j];
                match labels.labels()[p] {
                    Label::Exterior => None,
                    Label::Resonator => Some(-(anchor[j] + wrap_offset(y, anchor[j]))),
                    wl => {
                        let axis = wl.code() as usize - 2;
                        if axis == j {
                            Some(0.0)
                        } else {
                            let c = wire_coord(axis, j).expect("wire label implies wire");
                            Some(-(c + wrap_offset(y, c)))
                        }
                    }
                }
            })
            .collect()
    });
    let (theta_eta, reports) = if labels.labels().iter().all(|&l| l == Label::Exterior) {
        let zero = vec![0.0; nn];
        ([zero.clone(), zero.clone(), zero], vec![CgReport::default(); 3])
    } else {
        solve_dirichlet(grid, &DirichletProblem { values }, opts)?
    };
    let grad = build_grad(grid);
    let vth_eta = [0, 1, 2].map(|j| corrector_field(&grad, grid, &theta_eta[j], j));
    Ok(ThetaEtaSolution { eta, wire_radius: radius, labels, stats: stats(&reports), theta_eta, vth_eta })
}

impl ThetaEtaSolution {
    /// `‖ϑ^j_η − E^j‖_{L²}` per direction.
    pub fn l2_error(&self, cell: &ElectricCellSolution) -> [f64; 3] {
        let w = cell.grid.cell_volume();
        [0, 1, 2].map(|j| {
            let d: Vec<f64> = self.vth_eta[j].iter().zip(&cell.e_fields[j]).map(|(a, b)| a - b).collect();
            (w * dot(&d, &d)).sqrt()
        })
    }

    pub fn dirichlet_energies(&self, grid: &PeriodicGrid) -> [f64; 3] {
        [0, 1, 2].map(|j| dirichlet_energy(grid, &self.theta_eta[j]))
    }
}
