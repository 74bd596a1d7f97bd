//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 failed validation checks or unwritable output,
//! 2 configuration error, 3 solver failure, 4 resolution error. Failures are
//! reported on stderr as one JSON object.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig, SCHEMA_VERSION};
use crate::effective_medium::{compute_effective_tensors, sweep_with, CellOptions, EffectiveError};
use crate::electric_cell::{resonator_anchor, solve_electric_cell_on_mask, ElectricError};
use crate::geometry::{rasterize, write_complex_field, CellGeometry, GeometryError, Label};
use crate::magnetic_cell::{
    build_constrained_space, mu_eff_spectral, solve_magnetic_direct, solve_magnetic_spectrum, MagneticError,
};
use crate::solvers::SolverError;
use crate::validation::{run_suite, Status};
use crate::tensor_relative_difference;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_RESOLUTION: i32 = 4;

const GIT_HASH: &str = env!("METACELL_GIT_HASH");

#[derive(Debug, Parser)]
#[command(name = "metacell", version, about = "Effective ε and μ of periodic resonator/wire metamaterial cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` of the config; default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Eigensolver seed (overrides the config).
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the electric cell problems and write `a_eff.json`.
    CellElectric {
        /// Also write the corrector fields `E^j` in the voxel binary format.
        #[arg(long)]
        dump_fields: bool,
    },
    /// Compute the magnetic spectrum (`spectrum.csv`) and, given `q`, `mu_at_q.json`.
    CellMagnetic {
        /// Also solve the cell problem directly at `q` and compare routes.
        #[arg(long)]
        direct: bool,
        /// Evaluation point `q = ε_b k²` as `RE,IM`.
        #[arg(long, value_name = "RE,IM", value_parser = parse_complex, allow_hyphen_values = true)]
        q: Option<Complex64>,
    },
    /// Sweep frequency: `sweep.csv`, `spectrum.csv`, `result.json`.
    Sweep,
    /// Run the invariant suite and write `validation.json`.
    Validate,
}

fn parse_complex(s: &str) -> Result<Complex64, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |t: &str| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    match parts.as_slice() {
        [re] => Ok(Complex64::new(num(re)?, 0.0)),
        [re, im] => Ok(Complex64::new(num(re)?, num(im)?)),
        _ => Err("expected RE,IM".into()),
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl Failure {
    fn config(message: impl Into<String>, field: Option<&str>) -> Self {
        Failure { code: EXIT_CONFIG, kind: "config", message: message.into(), field: field.map(Into::into) }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_CHECKS_FAILED, kind: "io", message: format!("{}: {e}", path.display()), field: None }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"kind": self.kind, "exit_code": self.code, "message": self.message, "field": self.field}})
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.to_string(), e.field())
    }
}

fn from_geometry(e: &GeometryError) -> Failure {
    match e {
        GeometryError::ResolutionTooCoarse { .. } | GeometryError::GridTooSmall { .. } => {
            Failure { code: EXIT_RESOLUTION, kind: "resolution", message: e.to_string(), field: Some("grid.n".into()) }
        }
        _ => Failure::config(e.to_string(), Some("geometry")),
    }
}

fn solver(message: String) -> Failure {
    Failure { code: EXIT_SOLVER, kind: "solver", message, field: None }
}

impl From<ElectricError> for Failure {
    fn from(e: ElectricError) -> Self {
        match &e {
            ElectricError::Geometry(g) => from_geometry(g),
            ElectricError::ResolutionMismatch { .. } => {
                Failure { code: EXIT_RESOLUTION, kind: "resolution", message: e.to_string(), field: None }
            }
            ElectricError::NoExterior => Failure::config(e.to_string(), Some("geometry.resonator")),
            ElectricError::Solver { .. } => solver(e.to_string()),
        }
    }
}

impl From<MagneticError> for Failure {
    fn from(e: MagneticError) -> Self {
        match &e {
            MagneticError::Geometry(g) => from_geometry(g),
            MagneticError::NoExterior | MagneticError::NoAdmissibleLoop { .. } => {
                Failure::config(e.to_string(), Some("geometry.resonator"))
            }
            MagneticError::PoleProximity { .. } => Failure::config(e.to_string(), Some("magnetic.q")),
            MagneticError::Eigen(SolverError::InvalidOptions(_)) => Failure::config(e.to_string(), Some("spectrum")),
            _ => solver(e.to_string()),
        }
    }
}

impl From<EffectiveError> for Failure {
    fn from(e: EffectiveError) -> Self {
        match e {
            EffectiveError::Grid(g) => {
                Failure { code: EXIT_RESOLUTION, kind: "resolution", message: g.to_string(), field: Some("grid.n".into()) }
            }
            EffectiveError::Geometry(g) => from_geometry(&g),
            EffectiveError::Electric(e) => e.into(),
            EffectiveError::Magnetic(e) => e.into(),
            e @ EffectiveError::InvalidFrequencyGrid(_) => Failure::config(e.to_string(), Some("sweep")),
            e @ EffectiveError::UnsupportedAnisotropic { .. } => solver(e.to_string()),
        }
    }
}

/// Metadata block embedded in every JSON output.
#[derive(Debug, Clone, Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    git_hash: &'static str,
    command: &'static str,
    schema_version: u32,
    seed: u64,
    grid_n: usize,
    config_sha256: String,
    config: &'a RunConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes output files and records their hashes for the manifest.
struct Output<'a> {
    dir: PathBuf,
    metadata: Metadata<'a>,
    files: Vec<(String, String)>,
}

impl<'a> Output<'a> {
    fn new(dir: PathBuf, command: &'static str, cfg: &'a RunConfig) -> Result<Self, Failure> {
        fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        let canonical = serde_json::to_string(cfg).expect("config serializes");
        let metadata = Metadata {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            git_hash: GIT_HASH,
            command,
            schema_version: SCHEMA_VERSION,
            seed: cfg.spectrum.eigen.seed,
            grid_n: cfg.grid.n,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config: cfg,
        };
        Ok(Output { dir, metadata, files: Vec::new() })
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    /// `{"metadata": …, "result": …, "result_sha256": …}`.
    fn write_json(&mut self, name: &str, result: &impl Serialize) -> Result<(), Failure> {
        let result = serde_json::to_value(result).expect("result serializes");
        let digest = sha256_hex(serde_json::to_string(&result).expect("value serializes").as_bytes());
        let doc = json!({"metadata": self.metadata, "result": result, "result_sha256": digest});
        let mut text = serde_json::to_string_pretty(&doc).expect("value serializes");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    fn write_field(&mut self, name: &str, n: usize, components: usize, data: &[Complex64]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        write_complex_field(&path, n, components, data).map_err(|e| Failure::io(&path, e))?;
        let bytes = fs::read(&path).map_err(|e| Failure::io(&path, e))?;
        self.files.push((name.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// `manifest.json`: metadata plus the SHA-256 of every file written.
    fn finish(self) -> Result<(), Failure> {
        let files: Vec<Value> = self.files.iter().map(|(p, h)| json!({"path": p, "sha256": h})).collect();
        let doc = json!({"metadata": self.metadata, "files": files});
        let mut text = serde_json::to_string_pretty(&doc).expect("value serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Failure::io(&path, e))
    }
}

fn bare(geom: &CellGeometry) -> CellGeometry {
    CellGeometry { wire_radius_alpha: 0.0, wires: vec![], ..geom.clone() }
}

fn grid_of(cfg: &RunConfig) -> Result<crate::discretization::PeriodicGrid, Failure> {
    crate::discretization::PeriodicGrid::new(cfg.grid.n).map_err(|e| Failure {
        code: EXIT_RESOLUTION,
        kind: "resolution",
        message: e.to_string(),
        field: Some("grid.n".into()),
    })
}

fn cell_options(cfg: &RunConfig) -> CellOptions {
    CellOptions { linear: cfg.solver, spectrum: cfg.spectrum }
}

fn cmd_cell_electric(cfg: &RunConfig, out: &mut Output<'_>, dump_fields: bool) -> Result<i32, Failure> {
    let grid = grid_of(cfg)?;
    // wires play no role in the electric cell problem, but an unresolvable wire is still an error
    rasterize(&cfg.geometry, grid.n()).map_err(|e| from_geometry(&e))?;
    let geom = bare(&cfg.geometry);
    let mask = rasterize(&geom, grid.n()).map_err(|e| from_geometry(&e))?;
    let cell = solve_electric_cell_on_mask(&mask.resonator(), resonator_anchor(&geom, &mask), &grid, &cfg.solver)?;
    let result = json!({
        "a_eff": cell.a_eff,
        "anchor": cell.anchor,
        "volume_fraction": mask.volume_fraction(Label::Resonator),
        "energy_diagonal": cell.energy_diagonal(),
        "iterations": cell.stats.iterations,
        "relative_residual": cell.stats.relative_residual,
    });
    out.write_json("a_eff.json", &result)?;
    if dump_fields {
        for (j, e) in cell.e_fields.iter().enumerate() {
            let data: Vec<Complex64> = e.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            out.write_field(&format!("e_field_{}.bin", j + 1), grid.n(), 3, &data)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_cell_magnetic(
    cfg: &RunConfig,
    out: &mut Output<'_>,
    q: Option<Complex64>,
    direct: bool,
) -> Result<i32, Failure> {
    let grid = grid_of(cfg)?;
    rasterize(&cfg.geometry, grid.n()).map_err(|e| from_geometry(&e))?;
    let mask = rasterize(&bare(&cfg.geometry), grid.n()).map_err(|e| from_geometry(&e))?;
    let space = build_constrained_space(&grid, &mask.resonator())?;
    let spectrum = solve_magnetic_spectrum(&space, &cfg.spectrum)?;
    out.write_bytes("spectrum.csv", spectrum.to_csv().as_bytes())?;
    out.write_json("spectrum.json", &spectrum)?;
    let q = q.or(cfg.magnetic.q);
    let direct = direct || cfg.magnetic.direct;
    let Some(q) = q else {
        if direct {
            return Err(Failure::config("the direct route needs an evaluation point q (--q RE,IM)", Some("magnetic.q")));
        }
        return Ok(EXIT_OK);
    };
    let spectral = mu_eff_spectral(&spectrum, q)?;
    let mut result = json!({"q": q, "spectral": spectral});
    if direct {
        let sol = solve_magnetic_direct(&space, q, &cfg.solver)?;
        let diagnostics = sol.diagnostics(&space)?;
        result["direct"] = json!({
            "mu": sol.mu,
            "iterations": sol.reports.iter().map(|r| r.iterations).collect::<Vec<_>>(),
            "diagnostics": diagnostics,
        });
        result["route_difference"] = json!(tensor_relative_difference(&spectral.mu, &sol.mu));
    }
    out.write_json("mu_at_q.json", &result)?;
    Ok(EXIT_OK)
}

fn cmd_sweep(cfg: &RunConfig, out: &mut Output<'_>) -> Result<i32, Failure> {
    let sweep_cfg = cfg.sweep.ok_or_else(|| Failure::config("missing sweep block", Some("sweep")))?;
    let grid = grid_of(cfg)?;
    rasterize(&cfg.geometry, grid.n()).map_err(|e| from_geometry(&e))?;
    let omegas = sweep_cfg.frequency_grid().samples()?;
    let tensors = compute_effective_tensors(&cfg.geometry, &cfg.materials, &grid, &cell_options(cfg))?;
    let result = sweep_with(&tensors.eps_eff, &tensors.spectrum, &cfg.materials, &omegas, &sweep_cfg.options());
    out.write_bytes("sweep.csv", result.to_csv().as_bytes())?;
    out.write_bytes("spectrum.csv", tensors.spectrum.to_csv().as_bytes())?;
    let bright: Vec<f64> = tensors.spectrum.modes.iter().filter(|m| m.bright).map(|m| m.lambda).collect();
    let doc = json!({
        "a_eff": tensors.a_eff,
        "eps_eff": tensors.eps_eff,
        "wire_dirs": tensors.wire_dirs,
        "spectrum": {
            "num_modes": tensors.spectrum.num_modes(),
            "bright_eigenvalues": bright,
            "incomplete": tensors.spectrum.incomplete,
            "cluster_warning": tensors.spectrum.cluster_warning,
        },
        "columns": crate::effective_medium::SweepResult::CSV_COLUMNS.as_slice(),
        "samples": result.samples,
    });
    out.write_json("result.json", &doc)?;
    Ok(EXIT_OK)
}

fn cmd_validate(cfg: &RunConfig, out: &mut Output<'_>) -> Result<i32, Failure> {
    let report = run_suite(cfg);
    out.write_json("validation.json", &report)?;
    let code = if report.has(Status::ResolutionTooCoarse) {
        EXIT_RESOLUTION
    } else if report.has(Status::SolverError) {
        EXIT_SOLVER
    } else if report.passed() {
        EXIT_OK
    } else {
        EXIT_CHECKS_FAILED
    };
    for c in report.checks.iter().filter(|c| !matches!(c.status, Status::Pass | Status::Skipped)) {
        eprintln!("{}: {}/{}: {} ({})", serde_json::to_string(&c.status).unwrap_or_default(), c.suite, c.name, c.value, c.detail);
    }
    Ok(code)
}

fn execute(cli: Cli) -> Result<i32, Failure> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::config("--threads must be at least 1", None));
        }
        // fails only if the pool was already initialized (repeat calls in-process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let path = cli.config.ok_or_else(|| Failure::config("--config PATH is required", None))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
        cfg.spectrum.eigen.seed = seed;
    }
    let dir = cli.out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let name = match cli.command {
        Command::CellElectric { .. } => "cell-electric",
        Command::CellMagnetic { .. } => "cell-magnetic",
        Command::Sweep => "sweep",
        Command::Validate => "validate",
    };
    let mut out = Output::new(dir, name, &cfg)?;
    let code = match cli.command {
        Command::CellElectric { dump_fields } => cmd_cell_electric(&cfg, &mut out, dump_fields)?,
        Command::CellMagnetic { direct, q } => cmd_cell_magnetic(&cfg, &mut out, q, direct)?,
        Command::Sweep => cmd_sweep(&cfg, &mut out)?,
        Command::Validate => cmd_validate(&cfg, &mut out)?,
    };
    out.finish()?;
    Ok(code)
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let f = Failure::config(e.to_string().trim().to_string(), None);
            eprintln!("{}", f.to_json());
            return f.code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_argument() {
        assert_eq!(parse_complex("30,2").unwrap(), Complex64::new(30.0, 2.0));
        assert_eq!(parse_complex("-1.5, 0.25").unwrap(), Complex64::new(-1.5, 0.25));
        assert_eq!(parse_complex("7").unwrap(), Complex64::new(7.0, 0.0));
        assert!(parse_complex("1,2,3").is_err());
        assert!(parse_complex("a,b").is_err());
    }

    #[test]
    fn error_codes() {
        let coarse = GeometryError::ResolutionTooCoarse { direction: 1, radius: 0.01, n: 8 };
        assert_eq!(Failure::from(ElectricError::Geometry(coarse)).code, EXIT_RESOLUTION);
        let f = Failure::from(MagneticError::Eigen(SolverError::NoConvergence { iterations: 3, residual: 1.0 }));
        assert_eq!((f.code, f.kind), (EXIT_SOLVER, "solver"));
        let f = Failure::from(ConfigError::Parse { field: "grid.n".into(), message: "bad".into() });
        assert_eq!(f.code, EXIT_CONFIG);
        assert_eq!(f.to_json()["error"]["field"], "grid.n");
    }

    #[test]
    fn missing_config_is_a_config_error() {
        assert_eq!(run(["metacell", "sweep"]), EXIT_CONFIG);
        assert_eq!(run(["metacell", "no-such-command"]), EXIT_CONFIG);
        assert_eq!(run(["metacell", "--version"]), EXIT_OK);
    }
}
