//! Magnetic cell problem on the space `X₀` of periodic edge fields that are
//! curl-free outside the resonator and have zero circulation.
//!
//! `X₀` is parametrized explicitly: a scalar potential `U` on the exterior
//! nodes (and resonator nodes touching the exterior) generates `u = GU` on
//! every edge with an exterior end, while edges with both ends inside the
//! resonator carry free values `w`. One exterior node is pinned to remove
//! the constant. The form `b₀(u,v) = ∫ curl u·curl v + div u div v` and the
//! `L²` mass are pulled back through this map `P`.
//!
//! Two routes to `μ^eff(q)`, `q = ε_b k²`:
//! * spectral: `μ = I + Σₙ q/(λₙ − q) mₙ mₙᵀ` over eigenpairs of `(PᵀAP, PᵀMP)`
//!   with moments `mₙ = ∫ Pφₙ`;
//! * direct: solve `(A_r − q M_r) x = q Pᵀ M e_j`, set `H^j = e_j + Px` and
//!   `μ_ij = (∫ H^j)_i`.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::{
    build_curl, build_div, build_face_div, build_grad, dot, integrate_edges, norm, PeriodicGrid, PeriodicPoisson,
    Scalar, SparseOperator,
};
use crate::geometry::{rasterize, CellGeometry, GeometryError};
use crate::solvers::{
    cocg_solve, eigs_krylov, eigs_smallest_with, pcg_solve, CgReport, EigenProblem, EigenSolveOptions, IdentityPreconditioner,
    JacobiPreconditioner, LinearOperator, LinearSolveOptions, Preconditioner, PreconditionerKind, SolverError,
};
use crate::Tensor3;

/// Moments of `L²`-normalized modes below this (`√|Y| = 1`) mark a mode dark.
pub const DARK_CUTOFF: f64 = 1e-10;
/// Default relative pole guard for real `q`.
pub const POLE_GUARD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MagneticError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("resonator covers the whole cell: no exterior nodes")]
    NoExterior,
    #[error("no admissible loop in direction {direction}: every grid line meets the resonator")]
    NoAdmissibleLoop { direction: usize },
    #[error("q = {q} lies within the pole guard of eigenvalue λ = {lambda}")]
    PoleProximity { q: Complex64, lambda: f64 },
    #[error("eigensolver: {0}")]
    Eigen(SolverError),
    #[error("direct solve for direction {direction}: {source}")]
    Direct { direction: usize, source: SolverError },
    #[error("field length {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Result of the circulation operator.
#[derive(Debug, Clone)]
pub struct Circulation<T> {
    pub value: [T; 3],
    /// Largest deviation between the three loops used per direction.
    pub spread: f64,
    /// Largest `|curl u|` over exterior faces.
    pub exterior_curl: f64,
    /// `spread ≤ 1e-8(1 + |value|)` held in every direction.
    pub loop_independent: bool,
}

/// Grid lines in direction `axis` lying entirely in the exterior; the
/// first triple `(a,b), (a+1,b), (a,b+1)` of such lines is returned.
fn exterior_loops(grid: &PeriodicGrid, resonator: &[bool], axis: usize) -> Option<[(usize, usize); 3]> {
    let n = grid.n();
    let t = [(axis + 1) % 3, (axis + 2) % 3];
    let line_clear = |a: usize, b: usize| {
        (0..n).all(|s| {
            let mut c = [0usize; 3];
            c[axis] = s;
            c[t[0]] = a % n;
            c[t[1]] = b % n;
            !resonator[grid.node_index(c[0], c[1], c[2])]
        })
    };
    for b in 0..n {
        for a in 0..n {
            if line_clear(a, b) && line_clear(a + 1, b) && line_clear(a, b + 1) {
                return Some([(a, b), ((a + 1) % n, b), (a, (b + 1) % n)]);
            }
        }
    }
    None
}

fn line_integral<T: Scalar>(grid: &PeriodicGrid, u: &[T], axis: usize, (a, b): (usize, usize)) -> T {
    let n = grid.n();
    let t = [(axis + 1) % 3, (axis + 2) % 3];
    let mut s = T::default();
    for step in 0..n {
        let mut c = [0usize; 3];
        c[axis] = step;
        c[t[0]] = a;
        c[t[1]] = b;
        s += u[grid.edge_index(axis, grid.node_index(c[0], c[1], c[2]))];
    }
    s * grid.h()
}

/// Faces none of whose four edges joins two resonator nodes.
pub fn exterior_faces(grid: &PeriodicGrid, resonator: &[bool]) -> Vec<bool> {
    let interior = interior_edges(grid, resonator);
    let nn = grid.num_nodes();
    (0..grid.num_faces())
        .map(|f| {
            let axis = f / nn;
            let p = f % nn;
            let a = (axis + 1) % 3;
            let b = (axis + 2) % 3;
            ![
                grid.edge_index(a, p),
                grid.edge_index(b, p),
                grid.edge_index(a, grid.step(p, b, true)),
                grid.edge_index(b, grid.step(p, a, true)),
            ]
            .iter()
            .any(|&e| interior[e])
        })
        .collect()
}

/// Edges whose two end nodes lie in the resonator.
pub fn interior_edges(grid: &PeriodicGrid, resonator: &[bool]) -> Vec<bool> {
    let nn = grid.num_nodes();
    (0..grid.num_edges())
        .map(|e| {
            let axis = e / nn;
            let p = e % nn;
            resonator[p] && resonator[grid.step(p, axis, true)]
        })
        .collect()
}

/// Circulation `∮u` of an edge field that is curl-free outside the
/// resonator, as line integrals along exterior grid lines. Three adjacent
/// lines per direction are evaluated to confirm loop independence.
pub fn circulation<T: Scalar>(
    grid: &PeriodicGrid,
    resonator: &[bool],
    u: &[T],
) -> Result<Circulation<T>, MagneticError> {
    if u.len() != grid.num_edges() {
        return Err(MagneticError::DimensionMismatch { expected: grid.num_edges(), got: u.len() });
    }
    if resonator.len() != grid.num_nodes() {
        return Err(MagneticError::DimensionMismatch { expected: grid.num_nodes(), got: resonator.len() });
    }
    let curl = build_curl(grid);
    let cu = curl.mul_vec(u);
    let ext = exterior_faces(grid, resonator);
    let exterior_curl = cu.iter().zip(&ext).filter(|(_, &e)| e).map(|(v, _)| v.abs_sq().sqrt()).fold(0.0, f64::max);
    let mut value = [T::default(); 3];
    let mut spread = 0.0f64;
    let mut loop_independent = true;
    for axis in 0..3 {
        let loops =
            exterior_loops(grid, resonator, axis).ok_or(MagneticError::NoAdmissibleLoop { direction: axis + 1 })?;
        let vals: Vec<T> = loops.iter().map(|&l| line_integral(grid, u, axis, l)).collect();
        let s = vals[1..].iter().map(|&v| (v - vals[0]).abs_sq().sqrt()).fold(0.0, f64::max);
        let mag = vals[0].abs_sq().sqrt();
        if s > 1e-8 * (1.0 + mag) {
            loop_independent = false;
        }
        spread = spread.max(s);
        value[axis] = vals[0];
    }
    if !loop_independent {
        log::warn!("circulation depends on the loop (spread {spread:.3e}); field is not curl-free outside the resonator (max exterior curl {exterior_curl:.3e})");
    }
    Ok(Circulation { value, spread, exterior_curl, loop_independent })
}

/// Discrete `X₀` with its parametrization and pulled-back operators.
pub struct ConstrainedSpace {
    grid: PeriodicGrid,
    resonator: Vec<bool>,
    scalar_nodes: Vec<usize>,
    gauge: usize,
    interior: Vec<usize>,
    p: SparseOperator,
    pt: SparseOperator,
    /// `[C; D] P`.
    k: SparseOperator,
    kt: SparseOperator,
    div: SparseOperator,
    grad: SparseOperator,
    poisson: PeriodicPoisson,
    /// `h³ Pᵀ 1_j`: moment functionals in reduced coordinates.
    moment_rows: [Vec<f64>; 3],
}

impl std::fmt::Debug for ConstrainedSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConstrainedSpace")
            .field("n", &self.grid.n())
            .field("scalar_dofs", &self.scalar_nodes.len())
            .field("vector_dofs", &self.interior.len())
            .finish()
    }
}

pub fn build_constrained_space(grid: &PeriodicGrid, resonator: &[bool]) -> Result<ConstrainedSpace, MagneticError> {
    let nn = grid.num_nodes();
    if resonator.len() != nn {
        return Err(MagneticError::DimensionMismatch { expected: nn, got: resonator.len() });
    }
    let gauge = (0..nn).find(|&p| !resonator[p]).ok_or(MagneticError::NoExterior)?;
    let interior_mask = interior_edges(grid, resonator);
    // scalar DOFs: every node touched by a non-interior edge
    let mut touched = vec![false; nn];
    for (e, &inner) in interior_mask.iter().enumerate() {
        if !inner {
            let axis = e / nn;
            let p = e % nn;
            touched[p] = true;
            touched[grid.step(p, axis, true)] = true;
        }
    }
    let mut node_dof = vec![None; nn];
    let mut scalar_nodes = Vec::new();
    for p in 0..nn {
        if touched[p] && p != gauge {
            node_dof[p] = Some(scalar_nodes.len());
            scalar_nodes.push(p);
        }
    }
    let ns = scalar_nodes.len();
    let mut edge_dof = vec![None; grid.num_edges()];
    let mut interior = Vec::new();
    for (e, &inner) in interior_mask.iter().enumerate() {
        if inner {
            edge_dof[e] = Some(ns + interior.len());
            interior.push(e);
        }
    }
    let dim = ns + interior.len();
    let ih = 1.0 / grid.h();
    let mut t = Vec::with_capacity(2 * grid.num_edges());
    for e in 0..grid.num_edges() {
        if let Some(d) = edge_dof[e] {
            t.push((e, d, 1.0));
        } else {
            let axis = e / nn;
            let p = e % nn;
            let q = grid.step(p, axis, true);
            if let Some(d) = node_dof[q] {
                t.push((e, d, ih));
            }
            if let Some(d) = node_dof[p] {
                t.push((e, d, -ih));
            }
        }
    }
    let p = SparseOperator::from_triplets(grid.num_edges(), dim, t);
    let pt = p.transpose();
    let curl = build_curl(grid);
    let div = build_div(grid);
    let cp = curl.matmul(&p);
    let dp = div.matmul(&p);
    let mut kt_trip = Vec::with_capacity(cp.nnz() + dp.nnz());
    for r in 0..cp.rows() {
        kt_trip.extend(cp.row(r).map(|(c, v)| (r, c, v)));
    }
    for r in 0..dp.rows() {
        kt_trip.extend(dp.row(r).map(|(c, v)| (cp.rows() + r, c, v)));
    }
    let k = SparseOperator::from_triplets(cp.rows() + dp.rows(), dim, kt_trip);
    let kt = k.transpose();
    let w = grid.cell_volume();
    let moment_rows = [0, 1, 2].map(|j| {
        let mut ones = vec![0.0; grid.num_edges()];
        ones[j * nn..(j + 1) * nn].iter_mut().for_each(|v| *v = w);
        pt.mul_vec(&ones)
    });
    Ok(ConstrainedSpace {
        grid: *grid,
        resonator: resonator.to_vec(),
        scalar_nodes,
        gauge,
        interior,
        p,
        pt,
        k,
        kt,
        div,
        grad: build_grad(grid),
        poisson: PeriodicPoisson::new(grid),
        moment_rows,
    })
}

/// Build the space for a geometry (wires are irrelevant here).
pub fn constrained_space_for(geom: &CellGeometry, grid: &PeriodicGrid) -> Result<ConstrainedSpace, MagneticError> {
    let mask = rasterize(&CellGeometry { wire_radius_alpha: 0.0, wires: vec![], ..geom.clone() }, grid.n())?;
    build_constrained_space(grid, &mask.resonator())
}

/// `PᵀAP` with `A = h³(CᵀC + DᵀD)`.
pub struct ReducedStiffness<'a>(pub &'a ConstrainedSpace);
/// `PᵀMP` with `M = h³ I`.
pub struct ReducedMass<'a>(pub &'a ConstrainedSpace);

impl<T: Scalar> LinearOperator<T> for ReducedStiffness<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        let kx = self.0.k.mul_vec(x);
        self.0.kt.apply(&kx, y);
        let w = self.0.grid.cell_volume();
        y.par_iter_mut().for_each(|v| *v = *v * w);
    }
}

impl<T: Scalar> LinearOperator<T> for ReducedMass<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        let px = self.0.p.mul_vec(x);
        self.0.pt.apply(&px, y);
        let w = self.0.grid.cell_volume();
        y.par_iter_mut().for_each(|v| *v = *v * w);
    }
}

/// `PᵀAP − q PᵀMP` for complex `q`.
struct ComplexShifted<'a> {
    space: &'a ConstrainedSpace,
    q: Complex64,
}

impl LinearOperator<Complex64> for ComplexShifted<'_> {
    fn dim(&self) -> usize {
        self.space.dim()
    }
    fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        let px = self.space.p.mul_vec(x);
        let kx = self.space.k.mul_vec(x);
        let mut a = vec![Complex64::default(); y.len()];
        self.space.kt.apply(&kx, &mut a);
        self.space.pt.apply(&px, y);
        let w = self.space.grid.cell_volume();
        let q = self.q;
        y.par_iter_mut().zip(a.par_iter()).for_each(|(yi, &ai)| *yi = (ai - q * *yi) * w);
    }
}

/// Block preconditioner for `PᵀAP − σPᵀMP`, `σ ≤ 0`: on the potential block
/// the operator acts like `h³(L² − σL)` and on the interior edges like
/// `h³(L − σ)` per component, `L = −Δ_h`; both are inverted by FFT with the
/// zero mode lifted to the smallest nonzero eigenvalue.
pub struct BlockPreconditioner<'a> {
    space: &'a ConstrainedSpace,
    shift: f64,
}

impl Preconditioner<f64> for BlockPreconditioner<'_> {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let s = self.space;
        let nn = s.grid.num_nodes();
        let w = s.grid.cell_volume();
        let floor = s.poisson.smallest_nonzero();
        let sigma = self.shift;
        let mut buf = vec![0.0; nn];
        for (d, &p) in s.scalar_nodes.iter().enumerate() {
            buf[p] = r[d];
        }
        s.poisson.apply_symbol_real(&mut buf, |l| {
            let l = l.max(floor);
            1.0 / (w * (l * l - sigma * l))
        });
        for (d, &p) in s.scalar_nodes.iter().enumerate() {
            z[d] = buf[p];
        }
        let ns = s.scalar_nodes.len();
        for axis in 0..3 {
            let edges: Vec<(usize, usize)> = s
                .interior
                .iter()
                .enumerate()
                .filter(|(_, &e)| e / nn == axis)
                .map(|(i, &e)| (ns + i, e % nn))
                .collect();
            if edges.is_empty() {
                continue;
            }
            buf.iter_mut().for_each(|v| *v = 0.0);
            for &(d, p) in &edges {
                buf[p] = r[d];
            }
            s.poisson.apply_symbol_real(&mut buf, |l| 1.0 / (w * (l.max(floor) - sigma)));
            for &(d, p) in &edges {
                z[d] = buf[p];
            }
        }
    }
}

impl ConstrainedSpace {
    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn resonator(&self) -> &[bool] {
        &self.resonator
    }

    pub fn dim(&self) -> usize {
        self.scalar_nodes.len() + self.interior.len()
    }

    pub fn num_scalar_dofs(&self) -> usize {
        self.scalar_nodes.len()
    }

    pub fn num_vector_dofs(&self) -> usize {
        self.interior.len()
    }

    /// Pinned exterior node.
    pub fn gauge_node(&self) -> usize {
        self.gauge
    }

    /// Parametrization `P` (edges × reduced).
    pub fn parametrization(&self) -> &SparseOperator {
        &self.p
    }

    /// Full edge field `Px`.
    pub fn lift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        self.p.mul_vec(x)
    }

    pub fn moment_rows(&self) -> &[Vec<f64>; 3] {
        &self.moment_rows
    }

    /// `∫ Px`.
    pub fn moment(&self, x: &[f64]) -> [f64; 3] {
        [0, 1, 2].map(|j| dot(&self.moment_rows[j], x))
    }

    pub fn preconditioner(&self, shift: f64) -> BlockPreconditioner<'_> {
        BlockPreconditioner { space: self, shift }
    }

    /// Reduced coordinates of `GV` for a nodal function `V`.
    fn reduce_gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let vg = v[self.gauge];
        for (d, &p) in self.scalar_nodes.iter().enumerate() {
            x[d] = v[p] - vg;
        }
        let gv = self.grad.mul_vec(v);
        let ns = self.scalar_nodes.len();
        for (i, &e) in self.interior.iter().enumerate() {
            x[ns + i] = gv[e];
        }
        x
    }

    /// Remove the gradient component: `x ← x − R(V)` with `GV` the
    /// `L²`-orthogonal projection of `Px` onto gradients. Gradients `GV` of
    /// Laplacian eigenfunctions are exact eigenfields with zero moment.
    pub fn project_out_gradients(&self, x: &mut [f64]) {
        let u = self.p.mul_vec(x);
        let mut v = self.div.mul_vec(&u);
        v.iter_mut().for_each(|t| *t = -*t);
        self.poisson.solve_mean_free(&mut v);
        let r = self.reduce_gradient(&v);
        x.iter_mut().zip(&r).for_each(|(a, b)| *a -= b);
    }

    /// Largest `|curl Px|` over exterior faces.
    pub fn max_exterior_curl(&self, x: &[f64]) -> f64 {
        let cu = build_curl(&self.grid).mul_vec(&self.lift(x));
        let ext = exterior_faces(&self.grid, &self.resonator);
        cu.iter().zip(&ext).filter(|(_, &e)| e).map(|(v, _)| v.abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumMode {
    /// Lowest eigenpairs overall.
    Full,
    /// Lowest eigenpairs with nonzero moment: the Krylov space is seeded
    /// with `(A_r − σM_r)⁻¹` applied to the moment functionals.
    Bright,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumOptions {
    pub eigen: EigenSolveOptions,
    pub mode: SpectrumMode,
    /// Project out the (dark) gradient eigenfields.
    pub deflate_gradients: bool,
    /// Relative gap below which neighbouring eigenvalues count as one cluster.
    pub cluster_tolerance: f64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            eigen: EigenSolveOptions::default(),
            mode: SpectrumMode::Bright,
            deflate_gradients: true,
            cluster_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Mode {
    pub lambda: f64,
    pub moment: [f64; 3],
    pub bright: bool,
    pub residual: f64,
    #[serde(skip)]
    pub reduced: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MagneticSpectrum {
    pub modes: Vec<Mode>,
    pub mode: SpectrumMode,
    pub cluster_warning: bool,
    /// Bright mode only: fewer than the requested modes could be resolved.
    pub incomplete: bool,
    /// Estimate of the first eigenvalue beyond the returned ones.
    pub next_value: Option<f64>,
    pub seed: u64,
    pub inner_iterations: usize,
    pub restarts: usize,
    pub volume_fraction: f64,
}

impl MagneticSpectrum {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.lambda).collect()
    }

    /// `Σ mₙ mₙᵀ` over the returned modes.
    pub fn moment_sum(&self) -> [[f64; 3]; 3] {
        let mut s = [[0.0; 3]; 3];
        for m in &self.modes {
            for i in 0..3 {
                for j in 0..3 {
                    s[i][j] += m.moment[i] * m.moment[j];
                }
            }
        }
        s
    }

    /// CSV with columns `n,lambda,m1,m2,m3,bright`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,lambda,m1,m2,m3,bright\n");
        for (i, m) in self.modes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                i + 1,
                m.lambda,
                m.moment[0],
                m.moment[1],
                m.moment[2],
                u8::from(m.bright)
            );
        }
        s
    }
}

pub fn solve_magnetic_spectrum(
    space: &ConstrainedSpace,
    opts: &SpectrumOptions,
) -> Result<MagneticSpectrum, MagneticError> {
    let stiff = ReducedStiffness(space);
    let mass = ReducedMass(space);
    let shift = opts.eigen.shift;
    let block = space.preconditioner(shift.min(0.0));
    let projector = |x: &mut [f64]| space.project_out_gradients(x);
    let requested = opts.eigen.num_eigenpairs;
    // ask for a few more so a degenerate cluster at the end is seen whole
    let eopts = EigenSolveOptions { num_eigenpairs: (requested + 3).min(space.dim()), ..opts.eigen };

    // Without a resonator the moment functionals vanish and every field is
    // a gradient: report the (all dark) gradient spectrum instead.
    let scale = space.grid.cell_volume() / space.grid.h() * (space.grid.num_nodes() as f64).sqrt();
    let coupled = space.moment_rows.iter().any(|b| norm(b) > 1e-12 * scale);
    let mode = if coupled { opts.mode } else { SpectrumMode::Full };
    let proj: Option<&(dyn Fn(&mut [f64]) + Sync)> =
        if opts.deflate_gradients && coupled { Some(&projector) } else { None };
    let problem = EigenProblem { a: &stiff, m: &mass, precond: &block, projector: proj };

    let (pairs, next_value, mut cluster_warning, incomplete, inner_iterations, restarts) = match mode {
        SpectrumMode::Full => {
            let res = eigs_smallest_with(&problem, &eopts).map_err(MagneticError::Eigen)?;
            (res.pairs, res.next_value, res.cluster_warning, false, res.inner_iterations, res.restarts)
        }
        SpectrumMode::Bright => {
            let shifted = ShiftedReal { a: &stiff, m: &mass, shift };
            let mut start = Vec::new();
            let mut inner = 0;
            for b in &space.moment_rows {
                let sol = pcg_solve(&shifted, b, None, &block, &opts.eigen.inner).map_err(MagneticError::Eigen)?;
                inner += sol.report.iterations;
                start.push(sol.x);
            }
            let res = eigs_krylov(&problem, &start, &space.moment_rows, DARK_CUTOFF, &eopts)
                .map_err(MagneticError::Eigen)?;
            (res.pairs, res.next_value, false, res.incomplete, inner + res.inner_iterations, 0)
        }
    };

    // keep whole clusters: largest count ≤ requested ending at a gap
    let values: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    let gap_after = |k: usize| -> bool {
        let next = values.get(k).copied().or(next_value);
        match next {
            Some(next) => (next - values[k - 1]).abs() > opts.cluster_tolerance * values[k - 1].abs().max(1.0),
            None => true,
        }
    };
    let mut keep = requested.min(values.len());
    while keep > 0 && !gap_after(keep) {
        keep -= 1;
    }
    if keep == 0 {
        keep = requested.min(values.len());
        cluster_warning |= keep > 0;
    }
    let next_value = values.get(keep).copied().or(next_value);
    let modes: Vec<Mode> = pairs
        .into_iter()
        .take(keep)
        .map(|p| {
            let moment = space.moment(&p.vector);
            let mag = moment.iter().map(|m| m * m).sum::<f64>().sqrt();
            Mode { lambda: p.value, moment, bright: mag >= DARK_CUTOFF, residual: p.residual, reduced: p.vector }
        })
        .collect();
    // the look-ahead pairs only serve cluster detection
    let incomplete = incomplete && modes.len() < requested;
    if incomplete {
        log::warn!(
            "bright spectrum incomplete: {} of {} modes resolved; higher bright modes are below the Krylov noise floor",
            modes.len(),
            requested
        );
    }
    let f = space.resonator.iter().filter(|&&r| r).count() as f64 / space.grid.num_nodes() as f64;
    log::info!(
        "magnetic spectrum: {} modes ({} bright), lambda_1 = {:?}, inner iterations {}",
        modes.len(),
        modes.iter().filter(|m| m.bright).count(),
        modes.first().map(|m| m.lambda),
        inner_iterations
    );
    Ok(MagneticSpectrum {
        modes,
        mode,
        cluster_warning,
        incomplete,
        next_value,
        seed: opts.eigen.seed,
        inner_iterations,
        restarts,
        volume_fraction: f,
    })
}

struct ShiftedReal<'a> {
    a: &'a ReducedStiffness<'a>,
    m: &'a ReducedMass<'a>,
    shift: f64,
}

impl LinearOperator<f64> for ShiftedReal<'_> {
    fn dim(&self) -> usize {
        LinearOperator::<f64>::dim(self.a)
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.a.apply(x, y);
        if self.shift != 0.0 {
            let mut mx = vec![0.0; x.len()];
            self.m.apply(x, &mut mx);
            y.iter_mut().zip(&mx).for_each(|(a, b)| *a -= self.shift * b);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralMu {
    pub mu: Tensor3,
    /// Norm of the last bright term included.
    pub truncation_residual: f64,
    pub bright_modes: usize,
}

/// `μ = I + Σ_bright q/(λₙ − q) mₙ mₙᵀ`.
pub fn mu_eff_spectral(spec: &MagneticSpectrum, q: Complex64) -> Result<SpectralMu, MagneticError> {
    mu_eff_spectral_guarded(spec, q, POLE_GUARD)
}

pub fn mu_eff_spectral_guarded(
    spec: &MagneticSpectrum,
    q: Complex64,
    pole_guard: f64,
) -> Result<SpectralMu, MagneticError> {
    let mut mu = crate::identity_tensor();
    let mut last = 0.0;
    let mut bright = 0;
    for m in spec.modes.iter().filter(|m| m.bright) {
        let gap = Complex64::new(m.lambda, 0.0) - q;
        if q.im == 0.0 && gap.norm() < pole_guard * m.lambda.abs() {
            return Err(MagneticError::PoleProximity { q, lambda: m.lambda });
        }
        let c = q / gap;
        for i in 0..3 {
            for j in 0..3 {
                mu[i][j] += c * (m.moment[i] * m.moment[j]);
            }
        }
        last = c.norm() * m.moment.iter().map(|v| v * v).sum::<f64>();
        bright += 1;
    }
    Ok(SpectralMu { mu, truncation_residual: last, bright_modes: bright })
}

#[derive(Debug, Clone)]
pub struct MagneticCellSolution {
    pub q: Complex64,
    /// Edge fields `H^j = e_j + u_j`.
    pub h_fields: [Vec<Complex64>; 3],
    /// Face fields `iωε₀ J^j = −curl H^j`.
    pub scaled_currents: [Vec<Complex64>; 3],
    pub mu: Tensor3,
    pub reports: Vec<CgReport>,
}

/// Direct solve of the magnetic cell problem at `q = ε_b k²`.
pub fn solve_magnetic_direct(
    space: &ConstrainedSpace,
    q: Complex64,
    opts: &LinearSolveOptions,
) -> Result<MagneticCellSolution, MagneticError> {
    let grid = &space.grid;
    let nn = grid.num_nodes();
    let op = ComplexShifted { space, q };
    let block = space.preconditioner(0.0);
    let jacobi;
    let pc: &dyn Preconditioner<f64> = match opts.preconditioner {
        PreconditionerKind::None => &IdentityPreconditioner,
        PreconditionerKind::Diagonal => {
            let mut d = vec![0.0; space.dim()];
            let kt = space.kt.transpose();
            for (c, v) in d.iter_mut().enumerate() {
                *v = kt.row(c).map(|(_, x)| x * x).sum::<f64>() * grid.cell_volume();
            }
            jacobi = JacobiPreconditioner::new(&d);
            &jacobi
        }
        PreconditionerKind::PeriodicPoisson => &block,
    };
    let curl = build_curl(grid);
    let results: Vec<Result<(Vec<Complex64>, Vec<Complex64>, CgReport), MagneticError>> = (0..3)
        .into_par_iter()
        .map(|j| {
            let rhs: Vec<Complex64> = space.moment_rows[j].iter().map(|&b| q * b).collect();
            let sol = cocg_solve(&op, &rhs, pc, opts).map_err(|source| MagneticError::Direct { direction: j + 1, source })?;
            let mut h = space.lift(&sol.x);
            h[j * nn..(j + 1) * nn].iter_mut().for_each(|v| *v += Complex64::new(1.0, 0.0));
            let mut cur = curl.mul_vec(&h);
            cur.iter_mut().for_each(|v| *v = -*v);
            Ok((h, cur, sol.report))
        })
        .collect();
    let mut h_fields = Vec::new();
    let mut currents = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        let (h, c, rep) = r?;
        h_fields.push(h);
        currents.push(c);
        reports.push(rep);
    }
    let h_fields: [Vec<Complex64>; 3] = h_fields.try_into().expect("three directions");
    let mut mu = [[Complex64::default(); 3]; 3];
    for (j, h) in h_fields.iter().enumerate() {
        let m = integrate_edges(grid, h).expect("edge field");
        for i in 0..3 {
            mu[i][j] = m[i];
        }
    }
    Ok(MagneticCellSolution {
        q,
        h_fields,
        scaled_currents: currents.try_into().expect("three directions"),
        mu,
        reports,
    })
}

/// Build the space for `geom` and solve directly.
pub fn solve_magnetic_direct_for(
    geom: &CellGeometry,
    grid: &PeriodicGrid,
    q: Complex64,
    opts: &LinearSolveOptions,
) -> Result<MagneticCellSolution, MagneticError> {
    let space = constrained_space_for(geom, grid)?;
    solve_magnetic_direct(&space, q, opts)
}

/// Post-solve checks of a direct solution.
#[derive(Debug, Clone, Serialize)]
pub struct DirectDiagnostics {
    /// `max_j |∮H^j − e_j|`.
    pub circulation_error: f64,
    pub loop_independent: bool,
    /// Largest `|J|` (scaled) on exterior faces.
    pub exterior_current: f64,
    /// `max |div H| / max |H|`.
    pub relative_div_h: f64,
    /// Largest `|div J|` (scaled).
    pub div_current: f64,
}

impl MagneticCellSolution {
    pub fn diagnostics(&self, space: &ConstrainedSpace) -> Result<DirectDiagnostics, MagneticError> {
        let grid = &space.grid;
        let ext = exterior_faces(grid, &space.resonator);
        let div = &space.div;
        let fdiv = build_face_div(grid);
        let mut d = DirectDiagnostics {
            circulation_error: 0.0,
            loop_independent: true,
            exterior_current: 0.0,
            relative_div_h: 0.0,
            div_current: 0.0,
        };
        for j in 0..3 {
            let c = circulation(grid, &space.resonator, &self.h_fields[j])?;
            for i in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                d.circulation_error = d.circulation_error.max((c.value[i] - expect).norm());
            }
            d.loop_independent &= c.loop_independent;
            let cur = &self.scaled_currents[j];
            d.exterior_current = cur
                .iter()
                .zip(&ext)
                .filter(|(_, &e)| e)
                .map(|(v, _)| v.norm())
                .fold(d.exterior_current, f64::max);
            let hmax = self.h_fields[j].iter().map(|v| v.norm()).fold(0.0, f64::max);
            let dh = div.mul_vec(&self.h_fields[j]).iter().map(|v| v.norm()).fold(0.0, f64::max);
            d.relative_div_h = d.relative_div_h.max(dh / hmax);
            let dj = fdiv.mul_vec(cur).iter().map(|v| v.norm()).fold(0.0, f64::max);
            d.div_current = d.div_current.max(dj);
        }
        Ok(d)
    }
}
