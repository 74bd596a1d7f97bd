//! Krylov solvers: preconditioned conjugate gradients for SPD systems,
//! conjugate-orthogonal CG for complex-symmetric systems, and a block
//! shift-invert Rayleigh–Ritz eigensolver for the lowest eigenpairs of a
//! symmetric pencil `(A, M)`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::{axpy, dot, norm, Scalar, SparseOperator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no convergence after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("right-hand side incompatible with singular operator (zero curvature at iteration {iterations}, relative residual {residual:.3e})")]
    IncompatibleRhs { iterations: usize, residual: f64 },
    #[error("breakdown in complex-symmetric iteration at step {iterations}")]
    Breakdown { iterations: usize },
    #[error("eigensolver did not converge: {converged} of {requested} pairs after {restarts} restarts (worst residual {worst_residual:.3e})")]
    EigenNoConvergence {
        converged: usize,
        requested: usize,
        restarts: usize,
        worst_residual: f64,
    },
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("dimension mismatch: operator has dimension {expected}, vector has {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Square linear map acting on vectors of `T`.
pub trait LinearOperator<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[T], y: &mut [T]);
    /// Main diagonal, when cheaply available.
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

impl<T: Scalar> LinearOperator<T> for SparseOperator {
    fn dim(&self) -> usize {
        assert_eq!(self.rows(), self.cols(), "operator must be square");
        self.rows()
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        SparseOperator::apply(self, x, y)
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(SparseOperator::diagonal(self))
    }
}

pub trait Preconditioner<T: Scalar>: Sync {
    fn apply(&self, r: &[T], z: &mut [T]);
}

pub struct IdentityPreconditioner;

impl<T: Scalar> Preconditioner<T> for IdentityPreconditioner {
    fn apply(&self, r: &[T], z: &mut [T]) {
        z.copy_from_slice(r);
    }
}

pub struct JacobiPreconditioner {
    inv_diag: Vec<f64>,
}

impl JacobiPreconditioner {
    /// Entries with a nonpositive diagonal are passed through unscaled.
    pub fn new(diag: &[f64]) -> Self {
        Self {
            inv_diag: diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect(),
        }
    }
}

impl<T: Scalar> Preconditioner<T> for JacobiPreconditioner {
    fn apply(&self, r: &[T], z: &mut [T]) {
        z.par_iter_mut()
            .zip(r.par_iter().zip(self.inv_diag.par_iter()))
            .for_each(|(zi, (&ri, &d))| *zi = ri * d);
    }
}

/// Applies a real preconditioner to the real and imaginary parts separately.
pub struct ComplexifiedPreconditioner<'a>(pub &'a dyn Preconditioner<f64>);

impl Preconditioner<Complex64> for ComplexifiedPreconditioner<'_> {
    fn apply(&self, r: &[Complex64], z: &mut [Complex64]) {
        let re: Vec<f64> = r.iter().map(|c| c.re).collect();
        let im: Vec<f64> = r.iter().map(|c| c.im).collect();
        let mut zr = vec![0.0; r.len()];
        let mut zi = vec![0.0; r.len()];
        self.0.apply(&re, &mut zr);
        self.0.apply(&im, &mut zi);
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = Complex64::new(zr[k], zi[k]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    None,
    Diagonal,
    /// Exact inverse of the torus Laplacian (FFT), restricted to the unknowns.
    /// Only operators that know their grid provide it; others fall back to
    /// `Diagonal`.
    PeriodicPoisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSolveOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub preconditioner: PreconditionerKind,
}

impl Default for LinearSolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 20_000,
            preconditioner: PreconditionerKind::PeriodicPoisson,
        }
    }
}

impl LinearSolveOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(SolverError::InvalidOptions(format!(
                "tolerance must lie in (0, 1), got {}",
                self.tolerance
            )));
        }
        if self.max_iterations < 1 {
            return Err(SolverError::InvalidOptions("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Convergence history of one Krylov solve.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
    /// Relative residual after each iteration (index 0 is the initial one).
    pub residual_history: Vec<f64>,
    /// `½xᵀAx − bᵀx` after each iteration; CG decreases it monotonically
    /// (equivalently the A-norm of the error / A⁻¹-norm of the residual).
    pub energy_history: Vec<f64>,
}

impl CgReport {
    /// Largest increase of the energy functional between consecutive
    /// iterations, relative to its magnitude.
    pub fn max_energy_increase(&self) -> f64 {
        let scale = self
            .energy_history
            .iter()
            .fold(0.0f64, |m, e| m.max(e.abs()))
            .max(f64::MIN_POSITIVE);
        self.energy_history
            .windows(2)
            .map(|w| (w[1] - w[0]) / scale)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// History as CSV text: `iteration,relative_residual,energy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,relative_residual,energy\n");
        for (k, r) in self.residual_history.iter().enumerate() {
            let e = self.energy_history.get(k).copied().unwrap_or(f64::NAN);
            s.push_str(&format!("{k},{r:e},{e:e}\n"));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Solution<T> {
    pub x: Vec<T>,
    pub report: CgReport,
}

/// CG with the preconditioner selected by `opts` (`PeriodicPoisson` falls
/// back to the diagonal here; grid-aware callers use [`pcg_solve`]).
pub fn cg_solve(
    a: &dyn LinearOperator<f64>,
    b: &[f64],
    opts: &LinearSolveOptions,
) -> Result<Solution<f64>, SolverError> {
    match opts.preconditioner {
        PreconditionerKind::None => pcg_solve(a, b, None, &IdentityPreconditioner, opts),
        PreconditionerKind::Diagonal | PreconditionerKind::PeriodicPoisson => {
            let pc = a
                .diagonal()
                .map(|d| JacobiPreconditioner::new(&d))
                .unwrap_or_else(|| JacobiPreconditioner::new(&vec![1.0; a.dim()]));
            pcg_solve(a, b, None, &pc, opts)
        }
    }
}

/// Preconditioned conjugate gradients for a symmetric positive
/// (semi-)definite operator.
pub fn pcg_solve(
    a: &dyn LinearOperator<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    precond: &dyn Preconditioner<f64>,
    opts: &LinearSolveOptions,
) -> Result<Solution<f64>, SolverError> {
    opts.validate()?;
    let n = a.dim();
    if b.len() != n {
        return Err(SolverError::DimensionMismatch { expected: n, got: b.len() });
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let bnorm = norm(b);
    let mut report = CgReport::default();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        report.residual_history.push(0.0);
        report.energy_history.push(0.0);
        return Ok(Solution { x, report });
    }
    let mut r = vec![0.0; n];
    a.apply(&x, &mut r);
    r.par_iter_mut().zip(b.par_iter()).for_each(|(ri, &bi)| *ri = bi - *ri);
    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rho = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    let energy = |x: &[f64], r: &[f64]| -> f64 {
        // ½xᵀAx − bᵀx = −½ xᵀ(b + r)
        let s: Vec<f64> = b.iter().zip(r).map(|(bi, ri)| bi + ri).collect();
        -0.5 * dot(x, &s)
    };
    report.residual_history.push(res);
    report.energy_history.push(energy(&x, &r));
    // curvature scale: largest diagonal entry when known, else the largest
    // Rayleigh quotient seen so far
    let mut max_curvature_ratio = a
        .diagonal()
        .map(|d| d.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .unwrap_or(0.0);
    for it in 1..=opts.max_iterations {
        if res <= opts.tolerance {
            break;
        }
        a.apply(&p, &mut q);
        let curvature = dot(&p, &q);
        let pp = dot(&p, &p);
        let ratio = curvature / pp;
        max_curvature_ratio = max_curvature_ratio.max(ratio);
        if !(curvature > 0.0) || ratio <= 1e-14 * max_curvature_ratio {
            return Err(SolverError::IncompatibleRhs { iterations: it, residual: res });
        }
        let alpha = rho / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        res = norm(&r) / bnorm;
        report.iterations = it;
        report.residual_history.push(res);
        report.energy_history.push(energy(&x, &r));
        log::trace!("solver=pcg iter={it} rel_residual={res:.6e}");
        precond.apply(&r, &mut z);
        let rho_new = dot(&r, &z);
        let beta = rho_new / rho;
        rho = rho_new;
        p.par_iter_mut().zip(z.par_iter()).for_each(|(pi, &zi)| *pi = zi + beta * *pi);
    }
    report.relative_residual = res;
    log::debug!("solver=pcg iterations={} rel_residual={:.6e}", report.iterations, res);
    if res > opts.tolerance {
        return Err(SolverError::NoConvergence { iterations: report.iterations, residual: res });
    }
    Ok(Solution { x, report })
}

/// Conjugate-orthogonal CG for complex-symmetric (`Aᵀ = A`, not Hermitian)
/// systems. The preconditioner must be real symmetric.
pub fn cocg_solve(
    a: &dyn LinearOperator<Complex64>,
    b: &[Complex64],
    precond: &dyn Preconditioner<f64>,
    opts: &LinearSolveOptions,
) -> Result<Solution<Complex64>, SolverError> {
    opts.validate()?;
    let n = a.dim();
    if b.len() != n {
        return Err(SolverError::DimensionMismatch { expected: n, got: b.len() });
    }
    let pc = ComplexifiedPreconditioner(precond);
    let mut x = vec![Complex64::default(); n];
    let bnorm = norm(b);
    let mut report = CgReport::default();
    if bnorm == 0.0 {
        report.residual_history.push(0.0);
        return Ok(Solution { x, report });
    }
    let mut r = b.to_vec();
    let mut z = vec![Complex64::default(); n];
    pc.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rho = dot(&r, &z);
    let mut q = vec![Complex64::default(); n];
    let mut res = 1.0;
    report.residual_history.push(res);
    for it in 1..=opts.max_iterations {
        a.apply(&p, &mut q);
        let mu = dot(&p, &q);
        if mu.norm() <= f64::MIN_POSITIVE || rho.norm() <= f64::MIN_POSITIVE {
            return Err(SolverError::Breakdown { iterations: it });
        }
        let alpha = rho / mu;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        res = norm(&r) / bnorm;
        report.iterations = it;
        report.residual_history.push(res);
        log::trace!("solver=cocg iter={it} rel_residual={res:.6e}");
        if res <= opts.tolerance {
            break;
        }
        pc.apply(&r, &mut z);
        let rho_new = dot(&r, &z);
        let beta = rho_new / rho;
        rho = rho_new;
        p.par_iter_mut().zip(z.par_iter()).for_each(|(pi, &zi)| *pi = zi + beta * *pi);
    }
    report.relative_residual = res;
    log::debug!("solver=cocg iterations={} rel_residual={:.6e}", report.iterations, res);
    if res > opts.tolerance {
        return Err(SolverError::NoConvergence { iterations: report.iterations, residual: res });
    }
    Ok(Solution { x, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenSolveOptions {
    pub num_eigenpairs: usize,
    /// Must lie below the wanted part of the spectrum.
    pub shift: f64,
    /// Bound on `‖Aφ − λMφ‖ / ‖Mφ‖` (Euclidean norms) for returned pairs.
    pub tolerance: f64,
    pub max_restarts: usize,
    pub block_size: usize,
    /// Largest search space kept before a thick restart (0 = automatic).
    pub max_basis: usize,
    pub seed: u64,
    /// Options for the inner `(A − σM)` solves.
    pub inner: LinearSolveOptions,
}

impl Default for EigenSolveOptions {
    fn default() -> Self {
        Self {
            num_eigenpairs: 40,
            shift: 0.0,
            tolerance: 1e-8,
            max_restarts: 40,
            block_size: 6,
            max_basis: 0,
            seed: 0x5eed,
            inner: LinearSolveOptions { tolerance: 1e-12, ..LinearSolveOptions::default() },
        }
    }
}

impl EigenSolveOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.num_eigenpairs < 1 {
            return Err(SolverError::InvalidOptions("num_eigenpairs must be at least 1".into()));
        }
        if self.block_size < 1 {
            return Err(SolverError::InvalidOptions("block_size must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(SolverError::InvalidOptions("eigen tolerance must be positive".into()));
        }
        self.inner.validate()
    }

    fn basis_limit(&self, dim: usize) -> usize {
        let auto = (3 * self.num_eigenpairs).max(self.num_eigenpairs + 4 * self.block_size).max(30);
        let lim = if self.max_basis == 0 { auto } else { self.max_basis };
        lim.min(dim)
    }
}

/// Relative size below which an M-orthogonalized direction counts as
/// dependent on the basis.
const DEPENDENCE_TOLERANCE: f64 = 1e-10;

/// Remainder threshold for directions of a start-block Krylov space; below
/// it, rounding noise outside the space would dominate the direction.
const KRYLOV_DEPENDENCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Ascending eigenvalues with M-orthonormal eigenvectors.
    pub pairs: Vec<EigenPair>,
    /// Approximation of the next eigenvalue beyond the returned ones.
    pub next_value: Option<f64>,
    /// Trailing returned eigenvalue is within tolerance of the next one.
    pub cluster_warning: bool,
    pub restarts: usize,
    pub inner_iterations: usize,
    pub seed: u64,
    /// The search space grew to the full dimension; all pairs are returned.
    pub exhausted: bool,
}

/// Symmetric pencil `(A, M)` plus solver hooks.
pub struct EigenProblem<'a> {
    pub a: &'a dyn LinearOperator<f64>,
    pub m: &'a dyn LinearOperator<f64>,
    /// Preconditioner for `A − σM`.
    pub precond: &'a dyn Preconditioner<f64>,
    /// Optional M-orthogonal projector onto an invariant subspace; applied
    /// to every search direction.
    pub projector: Option<&'a (dyn Fn(&mut [f64]) + Sync)>,
}

struct Shifted<'a> {
    a: &'a dyn LinearOperator<f64>,
    m: &'a dyn LinearOperator<f64>,
    shift: f64,
}

impl LinearOperator<f64> for Shifted<'_> {
    fn dim(&self) -> usize {
        self.a.dim()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.a.apply(x, y);
        if self.shift != 0.0 {
            let mut mx = vec![0.0; x.len()];
            self.m.apply(x, &mut mx);
            axpy(-self.shift, &mx, y);
        }
    }
}

/// Lowest eigenpairs of `A φ = λ M φ` with a diagonal-preconditioned inner
/// solver.
pub fn eigs_smallest(
    a: &dyn LinearOperator<f64>,
    m: &dyn LinearOperator<f64>,
    opts: &EigenSolveOptions,
) -> Result<EigenResult, SolverError> {
    let diag = match (a.diagonal(), m.diagonal()) {
        (Some(da), Some(dm)) => da.iter().zip(&dm).map(|(x, y)| x - opts.shift * y).collect(),
        (Some(da), None) => da,
        _ => vec![1.0; a.dim()],
    };
    let pc = JacobiPreconditioner::new(&diag);
    eigs_smallest_with(&EigenProblem { a, m, precond: &pc, projector: None }, opts)
}

struct Basis {
    q: Vec<Vec<f64>>,
    mq: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

impl Basis {
    fn len(&self) -> usize {
        self.q.len()
    }

    /// M-orthonormalize `v` against the basis (two passes); returns
    /// `(v, Mv)` or `None` when `v` is numerically dependent.
    fn orthonormalize(
        &self,
        m: &dyn LinearOperator<f64>,
        mut v: Vec<f64>,
        dependence: f64,
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut mv = vec![0.0; v.len()];
        m.apply(&v, &mut mv);
        let start = dot(&v, &mv).max(0.0).sqrt();
        if start == 0.0 {
            return None;
        }
        for _ in 0..2 {
            for (qi, mqi) in self.q.iter().zip(&self.mq) {
                let c = dot(mqi, &v);
                axpy(-c, qi, &mut v);
            }
        }
        m.apply(&v, &mut mv);
        let nrm = dot(&v, &mv).max(0.0).sqrt();
        if nrm <= dependence * start {
            return None;
        }
        let s = 1.0 / nrm;
        v.iter_mut().for_each(|x| *x *= s);
        mv.iter_mut().for_each(|x| *x *= s);
        Some((v, mv))
    }

    fn push(&mut self, q: Vec<f64>, mq: Vec<f64>, w: Vec<f64>) {
        let k = self.q.len();
        for (i, row) in self.h.iter_mut().enumerate() {
            row.push(dot(&self.mq[i], &w));
        }
        let mut new_row: Vec<f64> = self.w.iter().map(|wj| dot(&mq, wj)).collect();
        new_row.push(dot(&mq, &w));
        self.h.push(new_row);
        self.q.push(q);
        self.mq.push(mq);
        self.w.push(w);
        debug_assert_eq!(self.h.len(), k + 1);
    }

    /// New basis spanned by the given combinations of the current one.
    fn rotate<'y>(&self, ys: impl Iterator<Item = &'y Vec<f64>>) -> Basis {
        let ys: Vec<&Vec<f64>> = ys.collect();
        let q: Vec<Vec<f64>> = ys.iter().map(|y| Basis::combine(&self.q, y)).collect();
        let mq: Vec<Vec<f64>> = ys.iter().map(|y| Basis::combine(&self.mq, y)).collect();
        let w: Vec<Vec<f64>> = ys.iter().map(|y| Basis::combine(&self.w, y)).collect();
        let h: Vec<Vec<f64>> = mq.iter().map(|mqi| w.iter().map(|wj| dot(mqi, wj)).collect()).collect();
        Basis { q, mq, w, h }
    }

    fn combine(vs: &[Vec<f64>], coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; vs[0].len()];
        for (v, &c) in vs.iter().zip(coeffs) {
            if c != 0.0 {
                axpy(c, v, &mut out);
            }
        }
        out
    }
}

/// Ritz pairs `(θ, y)` of the projected `S`, largest `θ` (smallest `λ`) first.
fn rayleigh_ritz(basis: &Basis) -> Vec<(f64, Vec<f64>)> {
    let k = basis.len();
    let hm = DMatrix::from_fn(k, k, |i, j| 0.5 * (basis.h[i][j] + basis.h[j][i]));
    let eig = SymmetricEigen::new(hm);
    let mut order: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > 0.0).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    order.iter().map(|&i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect())).collect()
}

/// Block shift-invert Rayleigh–Ritz: the search space is expanded with
/// `(A − σM)⁻¹ M` applied to the current Ritz vectors, M-orthonormalized,
/// and thick-restarted from the best Ritz vectors when it grows past the
/// basis limit.
pub fn eigs_smallest_with(problem: &EigenProblem<'_>, opts: &EigenSolveOptions) -> Result<EigenResult, SolverError> {
    opts.validate()?;
    let dim = problem.a.dim();
    let nev = opts.num_eigenpairs.min(dim);
    let p = opts.block_size.min(dim);
    let limit = opts.basis_limit(dim).max(nev + 1).min(dim);
    let shifted = Shifted { a: problem.a, m: problem.m, shift: opts.shift };
    let mut inner_iterations = 0usize;

    let apply_s = |mq: &[f64], inner_its: &mut usize| -> Result<Vec<f64>, SolverError> {
        let sol = pcg_solve(&shifted, mq, None, problem.precond, &opts.inner)?;
        *inner_its += sol.report.iterations;
        let mut w = sol.x;
        if let Some(proj) = problem.projector {
            proj(&mut w);
        }
        Ok(w)
    };

    let mut basis = Basis { q: Vec::new(), mq: Vec::new(), w: Vec::new(), h: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pending: Vec<Vec<f64>> =
        (0..p).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut restarts = 0usize;
    let mut exhausted = false;

    loop {
        // expand
        let mut added = 0;
        for mut v in pending.drain(..) {
            if basis.len() >= dim {
                break;
            }
            if let Some(proj) = problem.projector {
                proj(&mut v);
            }
            if let Some((q, mq)) = basis.orthonormalize(problem.m, v, DEPENDENCE_TOLERANCE) {
                let w = apply_s(&mq, &mut inner_iterations)?;
                basis.push(q, mq, w);
                added += 1;
            }
        }
        if basis.len() >= dim {
            exhausted = true;
        } else if added == 0 {
            // stagnated: refill with random directions
            pending = (0..p).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            restarts += 1;
            if restarts > opts.max_restarts {
                return Err(SolverError::EigenNoConvergence {
                    converged: 0,
                    requested: nev,
                    restarts,
                    worst_residual: f64::INFINITY,
                });
            }
            continue;
        }

        // Rayleigh–Ritz on the pencil projected through S = (A − σM)⁻¹M
        let ritz = rayleigh_ritz(&basis);

        let mut pairs = Vec::with_capacity(nev);
        let mut unconverged = Vec::new();
        let mut worst = 0.0f64;
        let next_index = nev.min(ritz.len());
        for (idx, (theta, y)) in ritz.iter().take(next_index).enumerate() {
            let lambda = opts.shift + 1.0 / theta;
            let x = Basis::combine(&basis.q, y);
            let mx = Basis::combine(&basis.mq, y);
            let mut ax = vec![0.0; dim];
            problem.a.apply(&x, &mut ax);
            axpy(-lambda, &mx, &mut ax);
            let residual = norm(&ax) / norm(&mx);
            worst = worst.max(residual);
            if residual > opts.tolerance {
                unconverged.push(idx);
            }
            log::trace!("solver=eigs ritz={idx} lambda={lambda:.10e} residual={residual:.3e}");
            pairs.push(EigenPair { value: lambda, vector: x, residual });
        }
        let next_value = ritz.get(next_index).map(|(t, _)| opts.shift + 1.0 / t);
        log::debug!(
            "solver=eigs basis={} ritz={} unconverged={} worst_residual={:.3e} inner_its={}",
            basis.len(),
            ritz.len(),
            unconverged.len(),
            worst,
            inner_iterations
        );

        if exhausted {
            if !unconverged.is_empty() {
                log::warn!("solver=eigs invariant subspace reached with worst residual {worst:.3e}");
            }
            return Ok(EigenResult {
                pairs,
                next_value,
                cluster_warning: false,
                restarts,
                inner_iterations,
                seed: opts.seed,
                exhausted,
            });
        }
        if pairs.len() == nev && unconverged.is_empty() {
            let last = pairs.last().map(|pr| pr.value).unwrap_or(0.0);
            let cluster_warning = next_value
                .map(|nv| (nv - last).abs() <= opts.tolerance.max(1e-10) * last.abs().max(1.0))
                .unwrap_or(false);
            return Ok(EigenResult {
                pairs,
                next_value,
                cluster_warning,
                restarts,
                inner_iterations,
                seed: opts.seed,
                exhausted,
            });
        }

        // directions for the next block: S-residuals of the wanted, not yet
        // converged Ritz vectors, topped up with the following Ritz vectors
        let mut targets: Vec<usize> = unconverged.iter().copied().take(p).collect();
        let mut extra = next_index;
        while targets.len() < p && extra < ritz.len() {
            targets.push(extra);
            extra += 1;
        }
        let new_dirs: Vec<Vec<f64>> = targets
            .iter()
            .map(|&i| {
                let (theta, y) = &ritz[i];
                let mut r = Basis::combine(&basis.w, y);
                let x = Basis::combine(&basis.q, y);
                axpy(-theta, &x, &mut r);
                r
            })
            .collect();

        if basis.len() + new_dirs.len() > limit {
            restarts += 1;
            if restarts > opts.max_restarts {
                return Err(SolverError::EigenNoConvergence {
                    converged: pairs.len() - unconverged.len(),
                    requested: nev,
                    restarts,
                    worst_residual: worst,
                });
            }
            let keep = (nev + p).max(limit / 2).min(ritz.len());
            basis = basis.rotate(ritz.iter().take(keep).map(|(_, y)| y));
            log::debug!("solver=eigs restart={restarts} kept={keep}");
        }
        pending = new_dirs;
    }
}

/// Outcome of [`eigs_krylov`].
#[derive(Debug, Clone)]
pub struct KrylovResult {
    /// Converged selected pairs, ascending; every selected eigenvalue below
    /// the last one is included.
    pub pairs: Vec<EigenPair>,
    /// Next selected Ritz value beyond the returned pairs.
    pub next_value: Option<f64>,
    /// Fewer than the requested pairs converged before the space stopped
    /// growing (invariant, or basis limit reached).
    pub incomplete: bool,
    pub basis_size: usize,
    pub inner_iterations: usize,
}

/// Lowest eigenpairs of `(A, M)` that are visible to the functionals `f`,
/// i.e. with `(fᵢᵀφ)ᵢ` of norm above `cutoff`. The search space is the block
/// Krylov space of `S = (A − σM)⁻¹M` generated by `start`, which in exact
/// arithmetic contains exactly those eigenvectors when `start` lies in
/// `range(S M⁻¹ F)`. New blocks are `S` applied to the previous block
/// (not to residuals), so rounding outside the space stays at the level of
/// the inner solves; directions that fall below the dependence threshold end
/// the expansion.
pub fn eigs_krylov(
    problem: &EigenProblem<'_>,
    start: &[Vec<f64>],
    functionals: &[Vec<f64>],
    cutoff: f64,
    opts: &EigenSolveOptions,
) -> Result<KrylovResult, SolverError> {
    opts.validate()?;
    let dim = problem.a.dim();
    if start.iter().chain(functionals).any(|v| v.len() != dim) {
        let got = start.iter().chain(functionals).map(|v| v.len()).find(|&l| l != dim).unwrap_or(0);
        return Err(SolverError::DimensionMismatch { expected: dim, got });
    }
    let nev = opts.num_eigenpairs.min(dim);
    let limit = if opts.max_basis == 0 { (6 * nev).max(60) } else { opts.max_basis }.min(dim);
    let shifted = Shifted { a: problem.a, m: problem.m, shift: opts.shift };
    let mut inner_iterations = 0usize;

    let mut basis = Basis { q: Vec::new(), mq: Vec::new(), w: Vec::new(), h: Vec::new() };
    // functional values on the basis vectors
    let mut fq: Vec<Vec<f64>> = Vec::new();
    let mut pending: Vec<Vec<f64>> = start.to_vec();
    // Rayleigh–Ritz and residual checks are spaced geometrically
    let mut next_check = 0usize;
    loop {
        let mut next = Vec::new();
        for mut v in pending.drain(..) {
            if basis.len() >= limit {
                break;
            }
            if let Some(proj) = problem.projector {
                proj(&mut v);
            }
            if let Some((q, mq)) = basis.orthonormalize(problem.m, v, KRYLOV_DEPENDENCE_TOLERANCE) {
                let sol = pcg_solve(&shifted, &mq, None, problem.precond, &opts.inner)?;
                inner_iterations += sol.report.iterations;
                let mut w = sol.x;
                if let Some(proj) = problem.projector {
                    proj(&mut w);
                }
                fq.push(functionals.iter().map(|f| dot(f, &q)).collect());
                next.push(w.clone());
                basis.push(q, mq, w);
            }
        }
        let stalled = next.is_empty() || basis.len() >= limit;
        if !stalled && basis.len() < next_check {
            pending = next;
            continue;
        }
        next_check = basis.len() + (basis.len() / 8).max(start.len());

        let ritz = rayleigh_ritz(&basis);
        let mut pairs = Vec::new();
        let mut next_value = None;
        for (theta, y) in &ritz {
            let fv: f64 = (0..functionals.len())
                .map(|i| {
                    let v: f64 = y.iter().zip(&fq).map(|(c, f)| c * f[i]).sum();
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            if fv <= cutoff {
                continue;
            }
            let lambda = opts.shift + 1.0 / theta;
            if pairs.len() == nev {
                next_value = Some(lambda);
                break;
            }
            let x = Basis::combine(&basis.q, y);
            let mx = Basis::combine(&basis.mq, y);
            let mut ax = vec![0.0; dim];
            problem.a.apply(&x, &mut ax);
            axpy(-lambda, &mx, &mut ax);
            let residual = norm(&ax) / norm(&mx);
            log::trace!("solver=eigs_krylov lambda={lambda:.10e} functional={fv:.3e} residual={residual:.3e}");
            if residual > opts.tolerance {
                next_value = Some(lambda);
                break;
            }
            pairs.push(EigenPair { value: lambda, vector: x, residual });
        }
        log::debug!(
            "solver=eigs_krylov basis={} converged={} inner_its={}",
            basis.len(),
            pairs.len(),
            inner_iterations
        );
        let done = pairs.len() == nev;
        if done || stalled {
            if !done {
                log::info!(
                    "solver=eigs_krylov stopped at basis {} with {} of {} pairs converged",
                    basis.len(),
                    pairs.len(),
                    nev
                );
            }
            return Ok(KrylovResult {
                pairs,
                next_value,
                incomplete: !done,
                basis_size: basis.len(),
                inner_iterations,
            });
        }
        pending = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_neg_laplacian, PeriodicGrid};

    fn diag_operator(d: &[f64]) -> SparseOperator {
        SparseOperator::from_triplets(d.len(), d.len(), d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let id = diag_operator(&[1.0; 20]);
        let b: Vec<f64> = (0..20).map(|i| i as f64 - 3.5).collect();
        let sol = cg_solve(&id, &b, &LinearSolveOptions { preconditioner: PreconditionerKind::None, ..Default::default() }).unwrap();
        assert_eq!(sol.report.iterations, 1);
        for (x, y) in sol.x.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn periodic_laplacian_mean_free_rhs() {
        let grid = PeriodicGrid::new(12).unwrap();
        let l = build_neg_laplacian(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b: Vec<f64> = (0..grid.num_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        b.iter_mut().for_each(|v| *v -= mean);
        let opts = LinearSolveOptions { tolerance: 1e-10, ..Default::default() };
        let sol = cg_solve(&l, &b, &opts).unwrap();
        assert!(sol.report.relative_residual <= 1e-10);
        let xmean = sol.x.iter().sum::<f64>() / sol.x.len() as f64;
        assert!(xmean.abs() < 1e-10, "mean {xmean}");
        assert!(sol.report.max_energy_increase() <= 1e-14);
    }

    #[test]
    fn incompatible_rhs_is_reported() {
        let grid = PeriodicGrid::new(6).unwrap();
        let l = build_neg_laplacian(&grid);
        let b = vec![1.0; grid.num_nodes()];
        let err = cg_solve(&l, &b, &LinearSolveOptions::default()).unwrap_err();
        assert!(matches!(err, SolverError::IncompatibleRhs { .. }), "{err:?}");
    }

    #[test]
    fn no_convergence_is_reported() {
        let grid = PeriodicGrid::new(10).unwrap();
        let l = build_neg_laplacian(&grid).add_scaled(1.0, &diag_operator(&vec![1.0; 1000]), 1.0);
        let b: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 13) as f64).collect();
        let opts = LinearSolveOptions { max_iterations: 3, ..Default::default() };
        assert!(matches!(cg_solve(&l, &b, &opts), Err(SolverError::NoConvergence { iterations: 3, .. })));
    }

    #[test]
    fn rejects_bad_options() {
        let id = diag_operator(&[1.0; 3]);
        let opts = LinearSolveOptions { tolerance: 1.5, ..Default::default() };
        assert!(matches!(cg_solve(&id, &[1.0; 3], &opts), Err(SolverError::InvalidOptions(_))));
    }

    #[test]
    fn cocg_solves_shifted_laplacian() {
        let grid = PeriodicGrid::new(8).unwrap();
        let l = build_neg_laplacian(&grid);
        let q = Complex64::new(30.0, 2.0);
        struct ShiftedC<'a>(&'a SparseOperator, Complex64);
        impl LinearOperator<Complex64> for ShiftedC<'_> {
            fn dim(&self) -> usize {
                self.0.rows()
            }
            fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
                self.0.apply(x, y);
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi -= self.1 * xi;
                }
            }
        }
        let op = ShiftedC(&l, q);
        let b: Vec<Complex64> = (0..grid.num_nodes()).map(|i| Complex64::new((i % 5) as f64, (i % 3) as f64)).collect();
        let sol = cocg_solve(&op, &b, &IdentityPreconditioner, &LinearSolveOptions { tolerance: 1e-11, ..Default::default() }).unwrap();
        let mut r = vec![Complex64::default(); b.len()];
        op.apply(&sol.x, &mut r);
        let err = r.iter().zip(&b).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / norm(&b);
        assert!(err < 1e-10);
    }

    #[test]
    fn diagonal_pencil_returns_sorted_unit_vectors() {
        let d: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let a = diag_operator(&d);
        let m = diag_operator(&[1.0; 30]);
        let opts = EigenSolveOptions { num_eigenpairs: 5, block_size: 3, tolerance: 1e-10, ..Default::default() };
        let res = eigs_smallest(&a, &m, &opts).unwrap();
        for (k, pair) in res.pairs.iter().enumerate() {
            assert!((pair.value - (k + 1) as f64).abs() < 1e-10);
            assert!((pair.vector[k].abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn periodic_laplacian_spectrum() {
        // nullspace of constants handled with a negative shift
        let grid = PeriodicGrid::new(16).unwrap();
        let l = build_neg_laplacian(&grid);
        let m = diag_operator(&vec![1.0; grid.num_nodes()]);
        let opts = EigenSolveOptions { num_eigenpairs: 7, shift: -1.0, tolerance: 1e-6, ..Default::default() };
        let res = eigs_smallest(&l, &m, &opts).unwrap();
        assert!(res.pairs[0].value.abs() < 1e-8);
        let expected = 4.0 * PI2 / 4.0; // (2π)²
        for pair in &res.pairs[1..7] {
            assert!((pair.value - expected).abs() / expected < 0.02, "{}", pair.value);
        }
    }

    const PI2: f64 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
}
