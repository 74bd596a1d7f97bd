//! The invariant suite behind `metacell validate`: geometry assumptions,
//! mimetic operator identities, electric and magnetic cell invariants, the
//! shrinking-wire convergence ladder and passivity of the spectral formula.

use serde::Serialize;

use crate::config::RunConfig;
use crate::discretization::{build_curl, build_curl_dual, build_div, build_face_div, build_grad, PeriodicGrid};
use crate::effective_medium::{imag_part_eigenvalues, real_part_eigenvalues};
use crate::electric_cell::{solve_electric_cell_on_mask, solve_theta_eta, resonator_anchor, ElectricError};
use crate::geometry::{rasterize, validate_at, CellGeometry, GeometryError};
use crate::magnetic_cell::{build_constrained_space, mu_eff_spectral, solve_magnetic_direct, solve_magnetic_spectrum};
use crate::{identity_tensor, tensor_relative_difference, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    /// The grid cannot represent a feature the check needs.
    ResolutionTooCoarse,
    /// A solver inside the check did not converge.
    SolverError,
    /// Not applicable to this configuration.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteCheck {
    pub suite: &'static str,
    pub name: String,
    pub status: Status,
    /// Measured quantity (NaN when not measured).
    pub value: f64,
    /// Bound the value is compared against (NaN for boolean checks).
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub n: usize,
    pub checks: Vec<SuiteCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| matches!(c.status, Status::Pass | Status::Skipped))
    }

    pub fn has(&self, status: Status) -> bool {
        self.checks.iter().any(|c| c.status == status)
    }

    pub fn check(&self, suite: &str, name: &str) -> Option<&SuiteCheck> {
        self.checks.iter().find(|c| c.suite == suite && c.name == name)
    }
}

struct Recorder {
    checks: Vec<SuiteCheck>,
}

impl Recorder {
    /// `value ≤ threshold` passes.
    fn at_most(&mut self, suite: &'static str, name: &str, value: f64, threshold: f64, detail: String) {
        let status = if value <= threshold { Status::Pass } else { Status::Fail };
        self.checks.push(SuiteCheck { suite, name: name.into(), status, value, threshold, detail });
    }

    fn flag(&mut self, suite: &'static str, name: &str, ok: bool, value: f64, detail: String) {
        let status = if ok { Status::Pass } else { Status::Fail };
        self.checks.push(SuiteCheck { suite, name: name.into(), status, value, threshold: f64::NAN, detail });
    }

    fn status(&mut self, suite: &'static str, name: &str, status: Status, detail: String) {
        self.checks.push(SuiteCheck { suite, name: name.into(), status, value: f64::NAN, threshold: f64::NAN, detail });
    }
}

fn bare(geom: &CellGeometry) -> CellGeometry {
    CellGeometry { wire_radius_alpha: 0.0, wires: vec![], ..geom.clone() }
}

fn asymmetry(t: &Tensor3) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            num = num.max((t[i][j] - t[j][i]).norm());
            den = den.max(t[i][j].norm());
        }
    }
    num / den
}

/// Run every suite on the configured geometry at the configured resolution.
pub fn run_suite(cfg: &RunConfig) -> SuiteReport {
    let n = cfg.grid.n;
    let mut rec = Recorder { checks: Vec::new() };
    let grid = match PeriodicGrid::new(n) {
        Ok(g) => g,
        Err(e) => {
            rec.status("grid", "resolution", Status::ResolutionTooCoarse, e.to_string());
            return SuiteReport { n, checks: rec.checks };
        }
    };

    for c in validate_at(&cfg.geometry, n).checks {
        let status = match (c.passed, c.name.as_str()) {
            (true, _) => Status::Pass,
            (false, "rasterization") => Status::ResolutionTooCoarse,
            (false, _) => Status::Fail,
        };
        rec.checks.push(SuiteCheck {
            suite: "geometry",
            name: c.name,
            status,
            value: c.margin,
            threshold: 0.0,
            detail: c.detail,
        });
    }

    operator_checks(&mut rec, &grid);
    electric_checks(&mut rec, cfg, &grid);
    magnetic_checks(&mut rec, cfg, &grid);
    SuiteReport { n, checks: rec.checks }
}

fn operator_checks(rec: &mut Recorder, grid: &PeriodicGrid) {
    let grad = build_grad(grid);
    let curl = build_curl(grid);
    let div = build_div(grid);
    let scale = grad.max_abs();
    rec.at_most("operators", "curl_grad", curl.matmul(&grad).max_abs(), 1e-13, "max |curl∘grad| entry".into());
    rec.at_most(
        "operators",
        "div_curl",
        build_face_div(grid).matmul(&curl).max_abs(),
        1e-13,
        "max |div∘curl| entry".into(),
    );
    rec.at_most(
        "operators",
        "div_adjoint",
        div.add_scaled(1.0, &grad.transpose(), 1.0).max_abs() / scale,
        1e-12,
        "max |div + gradᵀ| relative to max |grad|".into(),
    );
    rec.at_most(
        "operators",
        "curl_adjoint",
        build_curl_dual(grid).add_scaled(1.0, &curl.transpose(), -1.0).max_abs() / scale,
        1e-12,
        "max |curl_dual − curlᵀ| relative to max |grad|".into(),
    );
}

fn electric_checks(rec: &mut Recorder, cfg: &RunConfig, grid: &PeriodicGrid) {
    const S: &str = "electric";
    let geom = bare(&cfg.geometry);
    let mask = match rasterize(&geom, grid.n()) {
        Ok(m) => m,
        Err(e) => return rec.status(S, "cell_solve", Status::ResolutionTooCoarse, e.to_string()),
    };
    let cell = match solve_electric_cell_on_mask(&mask.resonator(), resonator_anchor(&geom, &mask), grid, &cfg.solver) {
        Ok(c) => c,
        Err(ElectricError::Solver { .. }) | Err(ElectricError::NoExterior) => {
            return rec.status(S, "cell_solve", Status::SolverError, "electric cell solve failed".into())
        }
        Err(e) => return rec.status(S, "cell_solve", Status::Fail, e.to_string()),
    };
    let a = cell.a_eff;
    let energy = cell.energy_diagonal();
    let identity_gap = (0..3).map(|j| (a[j][j].re - energy[j]).abs() / a[j][j].re).fold(0.0, f64::max);
    rec.at_most(S, "energy_identity", identity_gap, 1e-10, "|A_jj − (1 + ∫|∇Θ^j|²)| / A_jj".into());
    rec.at_most(S, "symmetry", asymmetry(&a), 1e-10, "max |A_ij − A_ji| / max |A_ij|".into());
    let low = real_part_eigenvalues(&a)[0];
    rec.flag(S, "bounded_below_by_identity", low >= 1.0 - 1e-10, low, "smallest eigenvalue of A^eff ≥ 1".into());
    rec.at_most(
        S,
        "curl_free",
        cell.max_curl(),
        1e-8,
        "max |curl E^j| (E^j is a gradient plus a constant)".into(),
    );

    // shrinking-wire ladder
    const L: &str = "theta_eta";
    let wires = &cfg.geometry.wires;
    if cfg.geometry.wire_radius_alpha == 0.0 || wires.is_empty() {
        let eta = cfg.validation.etas.first().copied().unwrap_or(0.5);
        match solve_theta_eta(&cfg.geometry, grid, eta, &cfg.solver) {
            Ok(t) => {
                let err = t.l2_error(&cell).into_iter().fold(0.0, f64::max);
                rec.at_most(L, "no_wire_limit", err, 1e-9, "without wires ϑ_η = E".into());
            }
            Err(e) => rec.status(L, "no_wire_limit", Status::SolverError, e.to_string()),
        }
        return;
    }
    let theta_energy = [0, 1, 2].map(|j| energy[j] - 1.0);
    let mut errors: Vec<[f64; 3]> = Vec::new();
    for &eta in &cfg.validation.etas {
        let name = format!("eta_{eta}");
        match solve_theta_eta(&cfg.geometry, grid, eta, &cfg.solver) {
            Ok(t) => {
                let e = t.l2_error(&cell);
                let en = t.dirichlet_energies(grid);
                let ordered = (0..3).all(|j| theta_energy[j] <= en[j]);
                rec.flag(
                    L,
                    &format!("{name}_energy_order"),
                    ordered,
                    (0..3).map(|j| en[j] - theta_energy[j]).fold(f64::INFINITY, f64::min),
                    format!("A(Θ^j) ≤ A(Θ^j_η); A(Θ) = {theta_energy:?}, A(Θ_η) = {en:?}"),
                );
                rec.status(L, &format!("{name}_error"), Status::Pass, format!("‖ϑ^j_η − E^j‖ = {e:?}"));
                if let Some(c) = rec.checks.last_mut() {
                    c.value = e.iter().fold(0.0, |m: f64, v| m.max(*v));
                }
                errors.push(e);
            }
            Err(ElectricError::Geometry(e @ GeometryError::ResolutionTooCoarse { .. })) => {
                rec.status(L, &name, Status::ResolutionTooCoarse, e.to_string());
                return;
            }
            Err(e) => {
                rec.status(L, &name, Status::SolverError, e.to_string());
                return;
            }
        }
    }
    let decreasing = errors.windows(2).all(|w| (0..3).all(|j| w[1][j] < w[0][j]));
    rec.flag(
        L,
        "error_decreasing",
        decreasing,
        errors.len() as f64,
        "‖ϑ^j_η − E^j‖ strictly decreases along the η ladder for every j".into(),
    );
}

fn magnetic_checks(rec: &mut Recorder, cfg: &RunConfig, grid: &PeriodicGrid) {
    const S: &str = "magnetic";
    let geom = bare(&cfg.geometry);
    let mask = match rasterize(&geom, grid.n()) {
        Ok(m) => m,
        Err(e) => return rec.status(S, "spectrum", Status::ResolutionTooCoarse, e.to_string()),
    };
    let space = match build_constrained_space(grid, &mask.resonator()) {
        Ok(s) => s,
        Err(e) => return rec.status(S, "constrained_space", Status::Fail, e.to_string()),
    };
    let spectrum = match solve_magnetic_spectrum(&space, &cfg.spectrum) {
        Ok(s) => s,
        Err(e) => return rec.status(S, "spectrum", Status::SolverError, e.to_string()),
    };
    rec.flag(
        S,
        "spectrum_complete",
        !spectrum.incomplete,
        spectrum.num_modes() as f64,
        format!("{} modes, {} bright", spectrum.num_modes(), spectrum.modes.iter().filter(|m| m.bright).count()),
    );
    let lowest = spectrum.modes.iter().map(|m| m.lambda).fold(f64::INFINITY, f64::min);
    rec.flag(S, "eigenvalues_positive", lowest > 0.0, lowest, "smallest eigenvalue of the reduced pencil".into());

    let q = cfg.validation.route_q;
    let spectral = match mu_eff_spectral(&spectrum, q) {
        Ok(m) => m,
        Err(e) => return rec.status(S, "route_agreement", Status::Fail, e.to_string()),
    };
    rec.at_most(
        S,
        "truncation_residual",
        spectral.truncation_residual,
        1e-4,
        format!("last bright term at q = {q}"),
    );
    match solve_magnetic_direct(&space, q, &cfg.solver) {
        Ok(direct) => {
            let diff = tensor_relative_difference(&spectral.mu, &direct.mu);
            rec.at_most(
                S,
                "route_agreement",
                diff,
                cfg.validation.route_tolerance,
                format!("spectral vs direct μ^eff at q = {q}"),
            );
            match direct.diagnostics(&space) {
                Ok(d) => {
                    rec.at_most(S, "circulation", d.circulation_error, 1e-8, "max |∮H^j − e_j|".into());
                    rec.at_most(S, "exterior_current", d.exterior_current, 1e-8, "max |J| on exterior faces".into());
                    rec.flag(S, "loop_independent", d.loop_independent, f64::NAN, "circulation independent of loop".into());
                }
                Err(e) => rec.status(S, "circulation", Status::Fail, e.to_string()),
            }
            rec.at_most(S, "direct_symmetry", asymmetry(&direct.mu), 1e-6, "max |μ_ij − μ_ji| / max |μ_ij|".into());
        }
        Err(e) => rec.status(S, "route_agreement", Status::SolverError, e.to_string()),
    }

    if !space.resonator().iter().any(|&r| r) {
        let dev = tensor_relative_difference(&spectral.mu, &identity_tensor());
        rec.at_most(S, "empty_identity", dev, 1e-9, "empty resonator: μ^eff = I".into());
    }

    let eps_b = cfg.materials.eps_b;
    if eps_b.im > 0.0 {
        let mut worst = f64::INFINITY;
        for &k in &cfg.validation.passivity_k {
            match mu_eff_spectral(&spectrum, eps_b * (k * k)) {
                Ok(m) => worst = worst.min(imag_part_eigenvalues(&m.mu)[0]),
                Err(e) => return rec.status(S, "passivity", Status::Fail, e.to_string()),
            }
        }
        rec.flag(
            S,
            "passivity",
            worst >= -1e-10,
            worst,
            "smallest eigenvalue of Im μ^eff over the k samples ≥ −1e-10".into(),
        );
    } else {
        rec.status(S, "passivity", Status::Skipped, "lossless ε_b".into());
    }
}

