//! Uniform periodic grid on the unit torus with a staggered (Yee) layout.
//!
//! Layout conventions used throughout the crate:
//!
//! * node `p = (i, j, k)` sits at the voxel center `((i+½)h, (j+½)h, (k+½)h)`
//!   and carries scalar potentials; the flat index is x-fastest,
//!   `i + n*(j + n*k)`;
//! * edge `(axis, p)` joins node `p` to `p + e_axis` and carries the `axis`
//!   component of a vector field; flat index `axis*n³ + p`;
//! * face `(axis, p)` has normal `e_axis` and is spanned by the two edges of
//!   the other axes leaving `p`; flat index `axis*n³ + p`;
//! * cell `p` is the cube with lowest corner at node `p`.
//!
//! With these conventions `curl ∘ grad = 0`, `div ∘ curl = 0` and
//! `div = -gradᵀ` hold exactly, not just to truncation order.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Fixed reduction chunk; keeps parallel sums bit-reproducible.
const REDUCE_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid size must be at least 2, got {0}")]
    TooSmall(usize),
    #[error("field length {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Element type of discrete fields: `f64` for real solves, `Complex64` otherwise.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + Default
    + PartialEq
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Mul<f64, Output = Self>
    + AddAssign
    + 'static
{
    fn from_real(x: f64) -> Self;
    fn abs_sq(self) -> f64;
}

impl Scalar for f64 {
    fn from_real(x: f64) -> Self {
        x
    }
    fn abs_sq(self) -> f64 {
        self * self
    }
}

impl Scalar for Complex64 {
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn abs_sq(self) -> f64 {
        self.norm_sqr()
    }
}

/// Bilinear (unconjugated) dot product with a deterministic reduction order.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let partial: Vec<T> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(x, y)| {
            let mut s = T::default();
            for (&u, &v) in x.iter().zip(y) {
                s += u * v;
            }
            s
        })
        .collect();
    partial.into_iter().fold(T::default(), |acc, s| acc + s)
}

/// Euclidean norm with a deterministic reduction order.
pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(REDUCE_CHUNK)
        .map(|x| x.iter().map(|v| v.abs_sq()).sum::<f64>())
        .collect();
    partial.into_iter().sum::<f64>().sqrt()
}

/// Deterministic sum of a slice.
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let partial: Vec<T> = a
        .par_chunks(REDUCE_CHUNK)
        .map(|x| x.iter().fold(T::default(), |acc, &v| acc + v))
        .collect();
    partial.into_iter().fold(T::default(), |acc, s| acc + s)
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    y.par_iter_mut().zip(x.par_iter()).for_each(|(yi, &xi)| *yi += alpha * xi);
}

/// Uniform `n × n × n` grid on the flat torus `[0,1)³`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PeriodicGrid {
    n: usize,
}

impl PeriodicGrid {
    pub fn new(n: usize) -> Result<Self, GridError> {
        if n < 2 {
            return Err(GridError::TooSmall(n));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Quadrature weight of one node, edge or face.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(3)
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.n * self.n * self.n
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        3 * self.num_nodes()
    }

    #[inline]
    pub fn num_faces(&self) -> usize {
        3 * self.num_nodes()
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    #[inline]
    pub fn node_coords(&self, p: usize) -> [usize; 3] {
        let n = self.n;
        [p % n, (p / n) % n, p / (n * n)]
    }

    /// Neighbour of `p` one step along `axis`, wrapping periodically.
    #[inline]
    pub fn step(&self, p: usize, axis: usize, forward: bool) -> usize {
        let mut c = self.node_coords(p);
        c[axis] = if forward {
            if c[axis] + 1 == self.n {
                0
            } else {
                c[axis] + 1
            }
        } else if c[axis] == 0 {
            self.n - 1
        } else {
            c[axis] - 1
        };
        self.node_index(c[0], c[1], c[2])
    }

    /// Voxel-center position of node `p` in cell units.
    pub fn node_position(&self, p: usize) -> [f64; 3] {
        let c = self.node_coords(p);
        let h = self.h();
        [
            (c[0] as f64 + 0.5) * h,
            (c[1] as f64 + 0.5) * h,
            (c[2] as f64 + 0.5) * h,
        ]
    }

    #[inline]
    pub fn edge_index(&self, axis: usize, p: usize) -> usize {
        axis * self.num_nodes() + p
    }

    /// `(axis, node)` of an edge or face index.
    #[inline]
    pub fn split_index(&self, e: usize) -> (usize, usize) {
        let nn = self.num_nodes();
        (e / nn, e % nn)
    }

    /// Midpoint of edge `e`.
    pub fn edge_midpoint(&self, e: usize) -> [f64; 3] {
        let (axis, p) = self.split_index(e);
        let mut x = self.node_position(p);
        x[axis] += 0.5 * self.h();
        x
    }

    pub fn check_nodal<T>(&self, field: &[T]) -> Result<(), GridError> {
        if field.len() != self.num_nodes() {
            return Err(GridError::DimensionMismatch {
                expected: self.num_nodes(),
                got: field.len(),
            });
        }
        Ok(())
    }

    pub fn check_edges<T>(&self, field: &[T]) -> Result<(), GridError> {
        if field.len() != self.num_edges() {
            return Err(GridError::DimensionMismatch {
                expected: self.num_edges(),
                got: field.len(),
            });
        }
        Ok(())
    }
}

/// Periodic offset `x - anchor` wrapped into `[-½, ½)`.
#[inline]
pub fn wrap_offset(x: f64, anchor: f64) -> f64 {
    let d = x - anchor;
    d - d.round()
}

/// Quadrature of a nodal scalar field over the cell.
pub fn integrate_nodal<T: Scalar>(grid: &PeriodicGrid, field: &[T]) -> Result<T, GridError> {
    grid.check_nodal(field)?;
    Ok(sum(field) * grid.cell_volume())
}

/// Quadrature of an edge vector field over the cell, one entry per component.
pub fn integrate_edges<T: Scalar>(grid: &PeriodicGrid, field: &[T]) -> Result<[T; 3], GridError> {
    grid.check_edges(field)?;
    let nn = grid.num_nodes();
    let w = grid.cell_volume();
    Ok([
        sum(&field[..nn]) * w,
        sum(&field[nn..2 * nn]) * w,
        sum(&field[2 * nn..]) * w,
    ])
}

/// `∫_Y u · v` for edge fields (unconjugated).
pub fn edge_inner<T: Scalar>(grid: &PeriodicGrid, u: &[T], v: &[T]) -> T {
    dot(u, v) * grid.cell_volume()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    General,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    Unknown,
    Indefinite,
    PositiveSemiDefinite,
    PositiveDefinite,
}

/// Real sparse matrix in compressed sparse row form.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    pub symmetry: Symmetry,
    pub definiteness: Definiteness,
}

impl SparseOperator {
    /// Assemble from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        let mut op = Self {
            rows,
            cols,
            indptr,
            indices,
            values,
            symmetry: Symmetry::General,
            definiteness: Definiteness::Unknown,
        };
        op.prune_zeros();
        op
    }

    fn prune_zeros(&mut self) {
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.values[k] != 0.0 {
                    indices.push(self.indices[k]);
                    values.push(self.values[k]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn with_symmetry(mut self, symmetry: Symmetry, definiteness: Definiteness) -> Self {
        self.symmetry = symmetry;
        self.definiteness = definiteness;
        self
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |k| (self.indices[k], self.values[k]))
    }

    /// `y = A x`
    pub fn apply<T: Scalar>(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            let mut s = T::default();
            for k in self.indptr[r]..self.indptr[r + 1] {
                s += x[self.indices[k]] * self.values[k];
            }
            *yr = s;
        });
    }

    pub fn mul_vec<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::default(); self.rows];
        self.apply(x, &mut y);
        y
    }

    pub fn transpose(&self) -> SparseOperator {
        let mut t = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.push((c, r, v));
            }
        }
        let mut op = SparseOperator::from_triplets(self.cols, self.rows, t);
        op.symmetry = self.symmetry;
        op.definiteness = self.definiteness;
        op
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &SparseOperator) -> SparseOperator {
        assert_eq!(self.cols, other.rows);
        let mut t = Vec::new();
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    t.push((r, c, a * b));
                }
            }
        }
        SparseOperator::from_triplets(self.rows, other.cols, t)
    }

    /// Entrywise linear combination `alpha*self + beta*other`.
    pub fn add_scaled(&self, alpha: f64, other: &SparseOperator, beta: f64) -> SparseOperator {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut t = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.rows {
            t.extend(self.row(r).map(|(c, v)| (r, c, alpha * v)));
            t.extend(other.row(r).map(|(c, v)| (r, c, beta * v)));
        }
        SparseOperator::from_triplets(self.rows, self.cols, t)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|r| self.row(r).find(|&(c, _)| c == r).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|A - Aᵀ|` entry.
    pub fn asymmetry(&self) -> f64 {
        self.add_scaled(1.0, &self.transpose(), -1.0).max_abs()
    }
}

fn grid_triplets(grid: &PeriodicGrid, rows_per_axis: bool, f: impl Fn(usize, usize, &mut Vec<(usize, usize, f64)>)) -> Vec<(usize, usize, f64)> {
    let nn = grid.num_nodes();
    let mut t = Vec::new();
    let axes = if rows_per_axis { 3 } else { 1 };
    for axis in 0..axes {
        for p in 0..nn {
            f(axis, p, &mut t);
        }
    }
    t
}

/// Nodes → edges forward difference.
pub fn build_grad(grid: &PeriodicGrid) -> SparseOperator {
    let ih = 1.0 / grid.h();
    let t = grid_triplets(grid, true, |axis, p, t| {
        let e = grid.edge_index(axis, p);
        t.push((e, grid.step(p, axis, true), ih));
        t.push((e, p, -ih));
    });
    SparseOperator::from_triplets(grid.num_edges(), grid.num_nodes(), t)
}

/// Edges → nodes backward difference; equals `-gradᵀ`.
pub fn build_div(grid: &PeriodicGrid) -> SparseOperator {
    let ih = 1.0 / grid.h();
    let t = grid_triplets(grid, false, |_, p, t| {
        for axis in 0..3 {
            t.push((p, grid.edge_index(axis, p), ih));
            t.push((p, grid.edge_index(axis, grid.step(p, axis, false)), -ih));
        }
    });
    SparseOperator::from_triplets(grid.num_nodes(), grid.num_edges(), t)
}

/// Edges → faces circulation around each face.
pub fn build_curl(grid: &PeriodicGrid) -> SparseOperator {
    let ih = 1.0 / grid.h();
    let t = grid_triplets(grid, true, |axis, p, t| {
        let a = (axis + 1) % 3;
        let b = (axis + 2) % 3;
        let f = grid.edge_index(axis, p);
        // (∂_a u_b - ∂_b u_a) on the face spanned by e_a, e_b at p
        t.push((f, grid.edge_index(b, grid.step(p, a, true)), ih));
        t.push((f, grid.edge_index(b, p), -ih));
        t.push((f, grid.edge_index(a, grid.step(p, b, true)), -ih));
        t.push((f, grid.edge_index(a, p), ih));
    });
    SparseOperator::from_triplets(grid.num_faces(), grid.num_edges(), t)
}

/// Faces → edges curl built from backward differences. Paired with
/// [`build_curl`] it satisfies `⟨curl u, w⟩ = ⟨u, curl_dual w⟩`.
pub fn build_curl_dual(grid: &PeriodicGrid) -> SparseOperator {
    let ih = 1.0 / grid.h();
    let t = grid_triplets(grid, true, |axis, p, t| {
        // edge component `axis` gathers faces with normals b = axis+1 and a = axis+2
        let b = (axis + 1) % 3;
        let a = (axis + 2) % 3;
        let e = grid.edge_index(axis, p);
        t.push((e, grid.edge_index(a, grid.step(p, b, false)), -ih));
        t.push((e, grid.edge_index(a, p), ih));
        t.push((e, grid.edge_index(b, grid.step(p, a, false)), ih));
        t.push((e, grid.edge_index(b, p), -ih));
    });
    SparseOperator::from_triplets(grid.num_edges(), grid.num_faces(), t)
}

/// Faces → cells forward difference.
pub fn build_face_div(grid: &PeriodicGrid) -> SparseOperator {
    let ih = 1.0 / grid.h();
    let t = grid_triplets(grid, false, |_, p, t| {
        for axis in 0..3 {
            t.push((p, grid.edge_index(axis, grid.step(p, axis, true)), ih));
            t.push((p, grid.edge_index(axis, p), -ih));
        }
    });
    SparseOperator::from_triplets(grid.num_nodes(), grid.num_faces(), t)
}

/// Nodal 7-point Laplacian `-div ∘ grad` (positive semi-definite).
pub fn build_neg_laplacian(grid: &PeriodicGrid) -> SparseOperator {
    let ih2 = 1.0 / (grid.h() * grid.h());
    let t = grid_triplets(grid, false, |_, p, t| {
        t.push((p, p, 6.0 * ih2));
        for axis in 0..3 {
            t.push((p, grid.step(p, axis, true), -ih2));
            t.push((p, grid.step(p, axis, false), -ih2));
        }
    });
    SparseOperator::from_triplets(grid.num_nodes(), grid.num_nodes(), t)
        .with_symmetry(Symmetry::Symmetric, Definiteness::PositiveSemiDefinite)
}

/// Eigenvalues of the 7-point `-Δ_h` on the torus are
/// `Σ_c 4/h² sin²(π k_c / n)`; this applies functions of that operator with
/// three-dimensional FFTs.
pub struct PeriodicPoisson {
    grid: PeriodicGrid,
    symbol: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PeriodicPoisson {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicPoisson").field("n", &self.grid.n()).finish()
    }
}

impl PeriodicPoisson {
    pub fn new(grid: &PeriodicGrid) -> Self {
        let n = grid.n();
        let h = grid.h();
        let s1: Vec<f64> = (0..n)
            .map(|k| 4.0 / (h * h) * (PI * k as f64 / n as f64).sin().powi(2))
            .collect();
        let mut symbol = vec![0.0; grid.num_nodes()];
        for (p, s) in symbol.iter_mut().enumerate() {
            let c = grid.node_coords(p);
            *s = s1[c[0]] + s1[c[1]] + s1[c[2]];
        }
        let mut planner = FftPlanner::new();
        Self {
            grid: *grid,
            symbol,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    /// Smallest nonzero eigenvalue `4/h² sin²(π/n)`.
    pub fn smallest_nonzero(&self) -> f64 {
        let n = self.grid.n() as f64;
        4.0 * n * n * (PI / n).sin().powi(2)
    }

    fn fft3(&self, buf: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.grid.n();
        // x lines are contiguous
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(buf, &mut scratch);
        let mut line = vec![Complex64::default(); n];
        for axis in 1..3 {
            let stride = if axis == 1 { n } else { n * n };
            for k_outer in 0..n {
                for i in 0..n {
                    let base = if axis == 1 { i + n * n * k_outer } else { i + n * k_outer };
                    for (t, l) in line.iter_mut().enumerate() {
                        *l = buf[base + t * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (t, l) in line.iter().enumerate() {
                        buf[base + t * stride] = *l;
                    }
                }
            }
        }
    }

    /// Apply `g(σ)` to a nodal field in place, where `σ` ranges over the
    /// eigenvalues of `-Δ_h`.
    pub fn apply_symbol(&self, field: &mut [Complex64], g: impl Fn(f64) -> f64) {
        assert_eq!(field.len(), self.grid.num_nodes());
        self.fft3(field, &self.forward);
        let scale = 1.0 / self.grid.num_nodes() as f64;
        for (v, &s) in field.iter_mut().zip(&self.symbol) {
            *v *= g(s) * scale;
        }
        self.fft3(field, &self.inverse);
    }

    /// Real-valued convenience wrapper of [`apply_symbol`](Self::apply_symbol).
    pub fn apply_symbol_real(&self, field: &mut [f64], g: impl Fn(f64) -> f64) {
        let mut buf: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.apply_symbol(&mut buf, g);
        for (f, b) in field.iter_mut().zip(&buf) {
            *f = b.re;
        }
    }

    /// Mean-free solution of `-Δ_h u = f` (pseudo-inverse).
    pub fn solve_mean_free(&self, field: &mut [f64]) {
        self.apply_symbol_real(field, |s| if s > 0.0 { 1.0 / s } else { 0.0 });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn grad_of_constant_vanishes() {
        let grid = PeriodicGrid::new(8).unwrap();
        let g = build_grad(&grid);
        let y = g.mul_vec(&vec![3.25; grid.num_nodes()]);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn curl_dual_is_adjoint_of_curl() {
        for n in [4, 7] {
            let grid = PeriodicGrid::new(n).unwrap();
            let c = build_curl(&grid);
            let cd = build_curl_dual(&grid);
            let diff = cd.add_scaled(1.0, &c.transpose(), -1.0);
            assert_eq!(diff.max_abs(), 0.0);
        }
    }

    #[test]
    fn div_is_negative_grad_transpose() {
        let grid = PeriodicGrid::new(5).unwrap();
        let d = build_div(&grid);
        let g = build_grad(&grid);
        assert_eq!(d.add_scaled(1.0, &g.transpose(), 1.0).max_abs(), 0.0);
    }

    #[test]
    fn laplacian_matches_div_grad() {
        let grid = PeriodicGrid::new(6).unwrap();
        let dg = build_div(&grid).matmul(&build_grad(&grid));
        let l = build_neg_laplacian(&grid);
        assert!(dg.add_scaled(1.0, &l, 1.0).max_abs() < 1e-9);
    }

    #[test]
    fn integrate_constants_and_sines() {
        let grid = PeriodicGrid::new(16).unwrap();
        let c = vec![Complex64::new(2.0, -1.0); grid.num_nodes()];
        let v = integrate_nodal(&grid, &c).unwrap();
        assert!((v - Complex64::new(2.0, -1.0)).norm() < 1e-14);
        let s: Vec<f64> = (0..grid.num_nodes())
            .map(|p| (2.0 * PI * grid.node_position(p)[0]).sin())
            .collect();
        assert!(integrate_nodal(&grid, &s).unwrap().abs() < 1e-15);
        assert!(matches!(
            integrate_nodal(&grid, &s[1..]),
            Err(GridError::DimensionMismatch { .. })
        ));
        let e = vec![1.5; grid.num_edges()];
        let iv = integrate_edges(&grid, &e).unwrap();
        assert!(iv.iter().all(|&x| (x - 1.5).abs() < 1e-14));
    }

    #[test]
    fn poisson_fft_inverts_laplacian() {
        let grid = PeriodicGrid::new(10).unwrap();
        let pp = PeriodicPoisson::new(&grid);
        let mut f = random_vec(grid.num_nodes(), 3);
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        f.iter_mut().for_each(|v| *v -= mean);
        let mut u = f.clone();
        pp.solve_mean_free(&mut u);
        let lu = build_neg_laplacian(&grid).mul_vec(&u);
        let err = lu.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn sparse_from_triplets_sums_duplicates() {
        let a = SparseOperator::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, 1.0), (1, 0, -1.0)]);
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.diagonal(), vec![3.0, 0.0]);
    }

    #[test]
    fn wrap_offset_is_periodic() {
        assert!((wrap_offset(0.95, 0.05) + 0.1).abs() < 1e-15);
        assert!((wrap_offset(0.05, 0.95) - 0.1).abs() < 1e-15);
        assert!((wrap_offset(0.6, 0.5) - 0.1).abs() < 1e-15);
    }
}
