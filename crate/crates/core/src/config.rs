//! Run configuration: one JSON document with a versioned schema.
//!
//! Parsing errors and semantic violations are reported with the dotted path
//! of the offending field (`geometry.wire_radius_alpha`, `grid.n`, ...).

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effective_medium::{FrequencyGrid, Spacing, SweepOptions};
use crate::geometry::{validate_at, CellGeometry, MaterialParams, VALIDATION_RESOLUTION};
use crate::magnetic_cell::{SpectrumOptions, POLE_GUARD};
use crate::solvers::LinearSolveOptions;

pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_GRID: usize = 8;
pub const MAX_GRID: usize = 256;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{field}: {message}")]
    Parse { field: String, message: String },
    #[error("{}", .0.iter().map(|i| format!("{}: {}", i.field, i.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ConfigIssue>),
}

impl ConfigError {
    /// Dotted path of the first offending field, if known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { field, .. } => Some(field),
            ConfigError::Invalid(issues) => issues.first().map(|i| i.field.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub omega_min: f64,
    pub omega_max: f64,
    pub count: usize,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
    /// Relative distance to a bright eigenvalue that flags a sample near-pole.
    #[serde(default = "default_near_pole")]
    pub near_pole: f64,
    #[serde(default = "default_pole_guard")]
    pub pole_guard: f64,
}

fn default_spacing() -> Spacing {
    Spacing::Linear
}
fn default_near_pole() -> f64 {
    SweepOptions::default().near_pole
}
fn default_pole_guard() -> f64 {
    POLE_GUARD
}

impl SweepConfig {
    pub fn frequency_grid(&self) -> FrequencyGrid {
        FrequencyGrid { omega_min: self.omega_min, omega_max: self.omega_max, count: self.count, spacing: self.spacing }
    }

    pub fn options(&self) -> SweepOptions {
        SweepOptions { near_pole: self.near_pole, pole_guard: self.pole_guard }
    }
}

/// Settings of `cell-magnetic`; the command line overrides both.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MagneticConfig {
    /// Evaluation point of `μ^eff`, `[re, im]`.
    pub q: Option<Complex64>,
    /// Also run the direct solve at `q` and report the route difference.
    pub direct: bool,
}

/// Settings of the `validate` suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    /// Shrinking-wire parameters for the convergence ladder.
    pub etas: Vec<f64>,
    /// Complex `q` of the spectral/direct route comparison.
    pub route_q: Complex64,
    pub route_tolerance: f64,
    /// Lossy `q` samples `ε_b k²` at these `k` for the passivity check.
    pub passivity_k: Vec<f64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            etas: vec![0.25, 0.125, 0.0625],
            route_q: Complex64::new(30.0, 2.0),
            route_tolerance: 1e-3,
            passivity_k: vec![0.5, 1.0, 1.5, 2.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub geometry: CellGeometry,
    pub materials: MaterialParams,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: LinearSolveOptions,
    #[serde(default)]
    pub spectrum: SpectrumOptions,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub magnetic: MagneticConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Seed of the randomized eigensolver start; overrides `spectrum.eigen.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Parse and validate; voxel-mask paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Parse {
                field: if path == "." { "<root>".into() } else { path },
                message: e.inner().to_string(),
            }
        })?;
        if cfg.schema_version == SCHEMA_VERSION {
            cfg.geometry.load_masks(base).map_err(|e| ConfigError::Parse {
                field: "geometry.resonator.path".into(),
                message: e.to_string(),
            })?;
        }
        if let Some(seed) = cfg.seed {
            cfg.spectrum.eigen.seed = seed;
        }
        let issues = cfg.issues();
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Semantic violations, by field path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| out.push(ConfigIssue { field: field.into(), message });
        if self.schema_version != SCHEMA_VERSION {
            push("schema_version", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version));
            return out;
        }
        if !(MIN_GRID..=MAX_GRID).contains(&self.grid.n) {
            push("grid.n", format!("{} is outside [{MIN_GRID}, {MAX_GRID}]", self.grid.n));
        }
        for (field, message) in self.materials.validate() {
            push(&field, message);
        }
        for check in validate_at(&self.geometry, VALIDATION_RESOLUTION).failures() {
            // an unresolvable wire is a property of the resolution, reported when solving
            if check.name == "rasterization" {
                continue;
            }
            let field = match check.name.as_str() {
                "wire_radius_range" => "geometry.wire_radius_alpha",
                "wire_axes_valid" | "wires_disjoint" | "wires_disjoint_from_resonator" => "geometry.wires",
                "resonator_loaded" | "resonator_contained" | "resonator_connected" => "geometry.resonator",
                _ => "geometry",
            };
            push(field, format!("{} failed: {}", check.name, check.detail));
        }
        if let Err(e) = self.solver.validate() {
            push("solver", e.to_string());
        }
        if let Err(e) = self.spectrum.eigen.validate() {
            push("spectrum.eigen", e.to_string());
        }
        if !(self.spectrum.cluster_tolerance >= 0.0) {
            push("spectrum.cluster_tolerance", "must be nonnegative".into());
        }
        if let Some(sweep) = &self.sweep {
            if let Err(e) = sweep.frequency_grid().validate() {
                push("sweep", e.to_string());
            }
            if !(sweep.near_pole >= 0.0 && sweep.pole_guard >= 0.0) {
                push("sweep.near_pole", "pole windows must be nonnegative".into());
            }
        }
        if let Some(q) = self.magnetic.q {
            if !(q.re.is_finite() && q.im.is_finite()) {
                push("magnetic.q", "must be finite".into());
            }
        }
        if self.validation.etas.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            push("validation.etas", "every η must lie in (0, 1]".into());
        }
        if !(self.validation.route_tolerance > 0.0) {
            push("validation.route_tolerance", "must be positive".into());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "geometry": {"resonator": {"kind": "ball", "center": [0.5, 0.5, 0.5], "radius": 0.15},
                     "wire_radius_alpha": 0.0},
        "materials": {"eps_b": [4.0, 0.0], "eps_w": [-100.0, 1.0]},
        "grid": {"n": 16}
    }"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_json(text, Path::new("."))
    }

    fn with(key: &str, value: serde_json::Value) -> String {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let mut slot = &mut v;
        for part in key.split('.') {
            if slot.is_null() {
                *slot = serde_json::json!({});
            }
            slot = slot.as_object_mut().unwrap().entry(part).or_insert(serde_json::Value::Null);
        }
        *slot = value;
        v.to_string()
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.grid.n, 16);
        assert_eq!(cfg.materials.eps0, 1.0);
        assert_eq!(cfg.materials.wavenumber(2.0), 2.0);
        assert_eq!(cfg.solver, LinearSolveOptions::default());
        assert_eq!(cfg.spectrum, SpectrumOptions::default());
        assert!(cfg.sweep.is_none());
        assert_eq!(cfg.validation.etas, vec![0.25, 0.125, 0.0625]);
    }

    #[test]
    fn seed_overrides_eigen_seed() {
        let cfg = parse(&with("seed", 7.into())).unwrap();
        assert_eq!(cfg.spectrum.eigen.seed, 7);
    }

    #[test]
    fn invalid_wire_radius_names_field() {
        let err = parse(&with("geometry.wire_radius_alpha", 0.7.into())).unwrap_err();
        assert_eq!(err.field(), Some("geometry.wire_radius_alpha"));
        assert!(err.to_string().contains("geometry.wire_radius_alpha"));
    }

    #[test]
    fn grid_bounds() {
        for (n, ok) in [(7, false), (8, true), (256, true), (257, false)] {
            let r = parse(&with("grid.n", n.into()));
            assert_eq!(r.is_ok(), ok, "n = {n}");
            if let Err(e) = r {
                assert_eq!(e.field(), Some("grid.n"));
            }
        }
    }

    #[test]
    fn schema_errors_carry_paths() {
        let err = parse(&with("grid.m", 3.into())).unwrap_err();
        assert_eq!(err.field(), Some("grid.m"));
        let err = parse(&with("materials.eps_b", "x".into())).unwrap_err();
        assert_eq!(err.field(), Some("materials.eps_b"));
        let err = parse(&with("spectrum.eigen.tolerance", "tight".into())).unwrap_err();
        assert_eq!(err.field(), Some("spectrum.eigen.tolerance"));
        let err = parse(&with("schema_version", 2.into())).unwrap_err();
        assert_eq!(err.field(), Some("schema_version"));
        let err = parse(&with("materials.eps_b", serde_json::json!([4.0, -1.0]))).unwrap_err();
        assert_eq!(err.field(), Some("materials.eps_b"));
    }

    #[test]
    fn sweep_block() {
        let cfg = parse(&with("sweep", serde_json::json!({"omega_min": 0.5, "omega_max": 2.0, "count": 4})))
            .unwrap();
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.frequency_grid().samples().unwrap(), vec![0.5, 1.0, 1.5, 2.0]);
        assert_eq!(sweep.options(), SweepOptions::default());
        let err = parse(&with("sweep", serde_json::json!({"omega_min": 2.0, "omega_max": 1.0, "count": 4})))
            .unwrap_err();
        assert_eq!(err.field(), Some("sweep"));
    }

    #[test]
    fn round_trip() {
        let cfg = parse(MINIMAL).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }
}
