//! Periodicity-cell geometry: a resonator inside the unit cell plus up to
//! three axis-aligned periodic wires, validation of the geometric
//! assumptions, and voxel-center rasterization.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::wrap_offset;

pub const MAGIC: &[u8; 4] = b"MHVX";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
/// Resolution used by [`validate`] for its rasterized checks.
pub const VALIDATION_RESOLUTION: usize = 64;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("grid resolution n={n} is below the minimum of 8")]
    GridTooSmall { n: usize },
    #[error("resolution too coarse: wire {direction} of radius {radius} has an empty cross-section at n={n}")]
    ResolutionTooCoarse { direction: usize, radius: f64, n: usize },
    #[error("voxel mask {path:?} has not been loaded")]
    MaskNotLoaded { path: PathBuf },
    #[error("invalid voxel file: {0}")]
    BadFormat(String),
    #[error("i/o error on {path:?}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Resonator shape in cell coordinates, `Y = [0,1)³`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Ball { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_widths: [f64; 3] },
    /// Occupancy read from a voxel file; resampled by nearest voxel when
    /// rasterized at a different resolution.
    VoxelMask {
        path: PathBuf,
        #[serde(skip)]
        data: Option<Arc<VoxelMask>>,
    },
}

impl Shape {
    /// Membership of a point, with periodic wrap.
    pub fn contains(&self, y: [f64; 3]) -> Result<bool, GeometryError> {
        Ok(match self {
            Shape::Ball { center, radius } => {
                let d2: f64 = (0..3).map(|c| wrap_offset(y[c], center[c]).powi(2)).sum();
                d2 <= radius * radius
            }
            Shape::Box { center, half_widths } => {
                (0..3).all(|c| wrap_offset(y[c], center[c]).abs() <= half_widths[c])
            }
            Shape::VoxelMask { path, data } => {
                let mask = data.as_ref().ok_or_else(|| GeometryError::MaskNotLoaded { path: path.clone() })?;
                let m = mask.n();
                let idx = |t: f64| ((t.rem_euclid(1.0) * m as f64).floor() as usize).min(m - 1);
                mask.label(idx(y[0]), idx(y[1]), idx(y[2])) == Label::Resonator
            }
        })
    }

    /// Read the referenced voxel file (relative paths resolve against `base`).
    pub fn load(&mut self, base: &Path) -> Result<(), GeometryError> {
        if let Shape::VoxelMask { path, data } = self {
            let full = if path.is_absolute() { path.clone() } else { base.join(&*path) };
            *data = Some(Arc::new(read_labels(&full)?));
        }
        Ok(())
    }
}

/// Periodic cylinder of radius `α` around the line through `position` in
/// direction `e_direction`. `position` lists the coordinates on the two
/// remaining axes in increasing axis order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wire {
    /// 1, 2 or 3.
    pub direction: usize,
    pub position: [f64; 2],
}

impl Wire {
    /// Zero-based axis of the wire.
    pub fn axis(&self) -> usize {
        self.direction - 1
    }

    /// The two transverse axes, increasing.
    pub fn transverse_axes(&self) -> [usize; 2] {
        let a = self.axis();
        [(a + 1) % 3, (a + 2) % 3].sorted()
    }

    /// Fixed coordinate of the axis line on `axis` (which must be transverse).
    pub fn coordinate(&self, axis: usize) -> f64 {
        let t = self.transverse_axes();
        if axis == t[0] {
            self.position[0]
        } else {
            self.position[1]
        }
    }

    /// Periodic distance of `y` from the axis line.
    pub fn distance(&self, y: [f64; 3]) -> f64 {
        let t = self.transverse_axes();
        let d0 = wrap_offset(y[t[0]], self.position[0]);
        let d1 = wrap_offset(y[t[1]], self.position[1]);
        (d0 * d0 + d1 * d1).sqrt()
    }
}

trait Sorted {
    fn sorted(self) -> Self;
}

impl Sorted for [usize; 2] {
    fn sorted(self) -> Self {
        if self[0] <= self[1] {
            self
        } else {
            [self[1], self[0]]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGeometry {
    /// `None` is the empty resonator.
    pub resonator: Option<Shape>,
    pub wire_radius_alpha: f64,
    #[serde(default)]
    pub wires: Vec<Wire>,
}

impl CellGeometry {
    pub fn empty() -> Self {
        Self { resonator: None, wire_radius_alpha: 0.0, wires: Vec::new() }
    }

    pub fn ball(center: [f64; 3], radius: f64) -> Self {
        Self { resonator: Some(Shape::Ball { center, radius }), wire_radius_alpha: 0.0, wires: Vec::new() }
    }

    pub fn with_wires(mut self, alpha: f64, wires: Vec<Wire>) -> Self {
        self.wire_radius_alpha = alpha;
        self.wires = wires;
        self
    }

    /// Three wires through a common transverse point `(a, b)` per direction.
    pub fn standard_wires(a: f64, b: f64) -> Vec<Wire> {
        (1..=3).map(|d| Wire { direction: d, position: [a, b] }).collect()
    }

    /// Directions (zero-based) that carry a wire of positive radius.
    pub fn wire_axes(&self) -> [bool; 3] {
        let mut w = [false; 3];
        if self.wire_radius_alpha > 0.0 {
            for wire in &self.wires {
                if (1..=3).contains(&wire.direction) {
                    w[wire.axis()] = true;
                }
            }
        }
        w
    }

    pub fn load_masks(&mut self, base: &Path) -> Result<(), GeometryError> {
        if let Some(shape) = self.resonator.as_mut() {
            shape.load(base)?;
        }
        Ok(())
    }
}

fn unit() -> f64 {
    1.0
}

/// Material coefficients; natural units `ε₀ = μ₀ = 1` by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    /// Resonator permittivity coefficient, `[re, im]`.
    pub eps_b: Complex64,
    /// Wire permittivity coefficient, `[re, im]`.
    pub eps_w: Complex64,
    #[serde(default = "unit")]
    pub eps0: f64,
    #[serde(default = "unit")]
    pub mu0: f64,
}

impl MaterialParams {
    pub fn new(eps_b: Complex64, eps_w: Complex64) -> Self {
        Self { eps_b, eps_w, eps0: 1.0, mu0: 1.0 }
    }

    /// Problems with the coefficients, by field name.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        if !(self.eps_b.im >= 0.0) {
            errs.push(("materials.eps_b".into(), "imaginary part must be non-negative".into()));
        }
        if !(self.eps_w.im >= 0.0) {
            errs.push(("materials.eps_w".into(), "imaginary part must be non-negative".into()));
        }
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            errs.push(("materials.eps0".into(), "must be positive".into()));
        }
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            errs.push(("materials.mu0".into(), "must be positive".into()));
        }
        errs
    }

    /// Zero resonator loss: the magnetic response has real poles.
    pub fn is_lossless(&self) -> bool {
        self.eps_b.im == 0.0
    }

    /// Wavenumber `k = ω√(ε₀μ₀)`.
    pub fn wavenumber(&self, omega: f64) -> f64 {
        omega * (self.eps0 * self.mu0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Exterior,
    Resonator,
    Wire1,
    Wire2,
    Wire3,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Exterior => 0,
            Label::Resonator => 1,
            Label::Wire1 => 2,
            Label::Wire2 => 3,
            Label::Wire3 => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Label::Exterior,
            1 => Label::Resonator,
            2 => Label::Wire1,
            3 => Label::Wire2,
            4 => Label::Wire3,
            _ => return None,
        })
    }

    pub fn wire(axis: usize) -> Self {
        [Label::Wire1, Label::Wire2, Label::Wire3][axis]
    }
}

/// One label per voxel, x-fastest. Voxel `(i,j,k)` is centred at
/// `((i+½)/n, (j+½)/n, (k+½)/n)`, i.e. at grid node `(i,j,k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    n: usize,
    labels: Vec<Label>,
    /// Voxels claimed by more than one region (resonator wins over wires,
    /// lower wire index over higher).
    overlaps: usize,
}

impl VoxelMask {
    pub fn from_labels(n: usize, labels: Vec<Label>) -> Self {
        assert_eq!(labels.len(), n * n * n, "label count must be n³");
        Self { n, labels, overlaps: 0 }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, i: usize, j: usize, k: usize) -> Label {
        self.labels[i + self.n * (j + self.n * k)]
    }

    pub fn overlaps(&self) -> usize {
        self.overlaps
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn volume_fraction(&self, label: Label) -> f64 {
        self.count(label) as f64 / self.labels.len() as f64
    }

    /// Resonator indicator (wires are ignored by the cell problems).
    pub fn resonator(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == Label::Resonator).collect()
    }

    /// Number of 6-connected components of the resonator region (periodic).
    pub fn resonator_components(&self) -> usize {
        let n = self.n;
        let mut seen = vec![false; self.labels.len()];
        let mut components = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.labels.len() {
            if seen[start] || self.labels[start] != Label::Resonator {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                let c = [p % n, (p / n) % n, p / (n * n)];
                for axis in 0..3 {
                    for delta in [1, n - 1] {
                        let mut q = c;
                        q[axis] = (q[axis] + delta) % n;
                        let qi = q[0] + n * (q[1] + n * q[2]);
                        if !seen[qi] && self.labels[qi] == Label::Resonator {
                            seen[qi] = true;
                            queue.push_back(qi);
                        }
                    }
                }
            }
        }
        components
    }
}

fn voxel_center(n: usize, p: usize) -> [f64; 3] {
    let h = 1.0 / n as f64;
    [(p % n) as f64, ((p / n) % n) as f64, (p / (n * n)) as f64].map(|c| (c + 0.5) * h)
}

/// Rasterize by voxel-center membership with wires of radius `α`.
pub fn rasterize(geom: &CellGeometry, n: usize) -> Result<VoxelMask, GeometryError> {
    rasterize_with_wire_radius(geom, n, geom.wire_radius_alpha)
}

/// Rasterize with an explicit wire radius (used for the shrinking-wire
/// potentials, where the radius inside the cell is `αη`).
pub fn rasterize_with_wire_radius(geom: &CellGeometry, n: usize, radius: f64) -> Result<VoxelMask, GeometryError> {
    if n < 8 {
        return Err(GeometryError::GridTooSmall { n });
    }
    let total = n * n * n;
    let mut labels = vec![Label::Exterior; total];
    let mut overlaps = 0;
    for (p, label) in labels.iter_mut().enumerate() {
        let y = voxel_center(n, p);
        let mut claims = 0;
        if let Some(shape) = &geom.resonator {
            if shape.contains(y)? {
                *label = Label::Resonator;
                claims += 1;
            }
        }
        if radius > 0.0 {
            for wire in &geom.wires {
                if wire.distance(y) <= radius {
                    if claims == 0 {
                        *label = Label::wire(wire.axis());
                    }
                    claims += 1;
                }
            }
        }
        if claims > 1 {
            overlaps += 1;
        }
    }
    if radius > 0.0 {
        for wire in &geom.wires {
            // cross-section of the cylinder, counted in its own right even
            // where another region won the voxel
            let any = (0..total).any(|p| wire.distance(voxel_center(n, p)) <= radius);
            if !any {
                return Err(GeometryError::ResolutionTooCoarse { direction: wire.direction, radius, n });
            }
        }
    }
    Ok(VoxelMask { n, labels, overlaps })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Signed margin in cell units (positive = satisfied with room to spare);
    /// for counting checks the offending count, negated.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn push(checks: &mut Vec<Check>, name: &str, margin: f64, strict: bool, detail: String) {
    let passed = if strict { margin > 0.0 } else { margin >= 0.0 };
    checks.push(Check { name: name.to_string(), passed, margin, detail });
}

/// Distance from the box `center ± hw` (projected onto the two transverse
/// axes of `wire`) to the wire axis, periodic.
fn box_axis_distance(center: &[f64; 3], hw: &[f64; 3], wire: &Wire) -> f64 {
    let t = wire.transverse_axes();
    let d: Vec<f64> = (0..2)
        .map(|s| (wrap_offset(wire.position[s], center[t[s]]).abs() - hw[t[s]]).max(0.0))
        .collect();
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Check the geometric assumptions analytically where possible and on a
/// rasterization at [`VALIDATION_RESOLUTION`].
pub fn validate(geom: &CellGeometry) -> ValidationReport {
    validate_at(geom, VALIDATION_RESOLUTION)
}

pub fn validate_at(geom: &CellGeometry, n: usize) -> ValidationReport {
    let mut checks = Vec::new();
    let alpha = geom.wire_radius_alpha;
    let alpha_margin = if alpha.is_finite() { alpha.min(0.5 - alpha) } else { -1.0 };
    checks.push(Check {
        name: "wire_radius_range".into(),
        passed: (0.0..0.5).contains(&alpha),
        margin: alpha_margin,
        detail: format!("alpha = {alpha} must lie in [0, 0.5)"),
    });

    let mut wire_ok = geom.wires.len() <= 3;
    let mut seen = [false; 3];
    for w in &geom.wires {
        if !(1..=3).contains(&w.direction) || seen[w.direction - 1] {
            wire_ok = false;
        } else {
            seen[w.direction - 1] = true;
        }
        if !w.position.iter().all(|&c| c > 0.0 && c < 1.0) {
            wire_ok = false;
        }
    }
    push(
        &mut checks,
        "wire_axes_valid",
        if wire_ok { 1.0 } else { -1.0 },
        true,
        "at most one wire per direction 1..3, transverse position in (0,1)²".into(),
    );

    // resonator compactly contained in the open cell
    let containment = match &geom.resonator {
        None => None,
        Some(Shape::Ball { center, radius }) => {
            Some((0..3).map(|c| (center[c] - radius).min(1.0 - center[c] - radius)).fold(f64::INFINITY, f64::min))
        }
        Some(Shape::Box { center, half_widths }) => Some(
            (0..3)
                .map(|c| (center[c] - half_widths[c]).min(1.0 - center[c] - half_widths[c]))
                .fold(f64::INFINITY, f64::min),
        ),
        Some(Shape::VoxelMask { data: Some(mask), .. }) => {
            let m = mask.n();
            let h = 1.0 / m as f64;
            let mut best = f64::INFINITY;
            for (p, &l) in mask.labels().iter().enumerate() {
                if l == Label::Resonator {
                    let c = [p % m, (p / m) % m, p / (m * m)];
                    for &ci in &c {
                        best = best.min(ci.min(m - 1 - ci) as f64 * h);
                    }
                }
            }
            Some(best)
        }
        Some(Shape::VoxelMask { path, data: None }) => {
            push(&mut checks, "resonator_loaded", -1.0, true, format!("voxel mask {path:?} not loaded"));
            None
        }
    };
    if let Some(m) = containment {
        push(&mut checks, "resonator_contained", m, true, format!("min distance to cell boundary {m:.6}"));
    }

    // wire/wire disjointness: the axes of wires d1 ≠ d2 share one fixed
    // coordinate axis; their distance is the periodic offset along it
    if alpha > 0.0 {
        let mut margin = f64::INFINITY;
        for (i, w1) in geom.wires.iter().enumerate() {
            for w2 in &geom.wires[i + 1..] {
                if w1.direction == w2.direction || !(1..=3).contains(&w1.direction) || !(1..=3).contains(&w2.direction) {
                    continue;
                }
                let common = 3 - w1.axis() - w2.axis();
                let d = wrap_offset(w1.coordinate(common), w2.coordinate(common)).abs();
                margin = margin.min(d - 2.0 * alpha);
            }
        }
        if margin.is_finite() {
            push(&mut checks, "wires_disjoint", margin, true, format!("min gap between wire surfaces {margin:.6}"));
        }

        let mut margin = f64::INFINITY;
        for w in geom.wires.iter().filter(|w| (1..=3).contains(&w.direction)) {
            let m = match &geom.resonator {
                None => f64::INFINITY,
                Some(Shape::Ball { center, radius }) => w.distance(*center) - alpha - radius,
                Some(Shape::Box { center, half_widths }) => box_axis_distance(center, half_widths, w) - alpha,
                Some(Shape::VoxelMask { data: Some(mask), .. }) => {
                    let m = mask.n();
                    let half_diag = 3f64.sqrt() * 0.5 / m as f64;
                    mask.labels()
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| l == Label::Resonator)
                        .map(|(p, _)| w.distance(voxel_center(m, p)) - half_diag - alpha)
                        .fold(f64::INFINITY, f64::min)
                }
                Some(Shape::VoxelMask { data: None, .. }) => f64::INFINITY,
            };
            margin = margin.min(m);
        }
        if margin.is_finite() {
            push(
                &mut checks,
                "wires_disjoint_from_resonator",
                margin,
                true,
                format!("min gap between resonator and wire surfaces {margin:.6}"),
            );
        }
    }

    // rasterized checks
    match rasterize(geom, n) {
        Ok(mask) => {
            push(
                &mut checks,
                "rasterized_overlap",
                -(mask.overlaps() as f64),
                false,
                format!("{} voxels claimed by more than one region at n={n}", mask.overlaps()),
            );
            if geom.resonator.is_some() {
                let comps = mask.resonator_components();
                push(
                    &mut checks,
                    "resonator_connected",
                    if comps == 1 { 1.0 } else { -(comps as f64) },
                    true,
                    format!("{comps} connected component(s) at n={n}"),
                );
            }
        }
        Err(e) => push(&mut checks, "rasterization", -1.0, true, e.to_string()),
    }
    ValidationReport { checks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Labels,
    ComplexF64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelHeader {
    pub version: u16,
    pub n: u32,
    pub kind: PayloadKind,
    pub components: u8,
}

impl VoxelHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.n.to_le_bytes());
        b[10] = match self.kind {
            PayloadKind::Labels => 0,
            PayloadKind::ComplexF64 => 1,
        };
        b[11] = self.components;
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, GeometryError> {
        if b.len() < HEADER_LEN {
            return Err(GeometryError::BadFormat("truncated header".into()));
        }
        if &b[..4] != MAGIC {
            return Err(GeometryError::BadFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != FORMAT_VERSION {
            return Err(GeometryError::BadFormat(format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes([b[6], b[7], b[8], b[9]]);
        let kind = match b[10] {
            0 => PayloadKind::Labels,
            1 => PayloadKind::ComplexF64,
            k => return Err(GeometryError::BadFormat(format!("unknown payload kind {k}"))),
        };
        if b[12..16] != [0; 4] {
            return Err(GeometryError::BadFormat("reserved bytes must be zero".into()));
        }
        Ok(Self { version, n, kind, components: b[11] })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> GeometryError + '_ {
    move |source| GeometryError::Io { path: path.to_path_buf(), source }
}

pub fn encode_labels(mask: &VoxelMask) -> Vec<u8> {
    let header = VoxelHeader { version: FORMAT_VERSION, n: mask.n() as u32, kind: PayloadKind::Labels, components: 1 };
    let mut out = header.to_bytes().to_vec();
    out.extend(mask.labels().iter().map(|l| l.code()));
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<VoxelMask, GeometryError> {
    let header = VoxelHeader::parse(bytes)?;
    if header.kind != PayloadKind::Labels || header.components != 1 {
        return Err(GeometryError::BadFormat("expected a single-component label payload".into()));
    }
    let n = header.n as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * n * n {
        return Err(GeometryError::BadFormat(format!("expected {} label bytes, found {}", n * n * n, payload.len())));
    }
    let labels = payload
        .iter()
        .map(|&c| Label::from_code(c).ok_or_else(|| GeometryError::BadFormat(format!("unknown label {c}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VoxelMask::from_labels(n, labels))
}

pub fn write_labels(path: &Path, mask: &VoxelMask) -> Result<(), GeometryError> {
    fs::write(path, encode_labels(mask)).map_err(io_err(path))
}

pub fn read_labels(path: &Path) -> Result<VoxelMask, GeometryError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    decode_labels(&bytes)
}

/// Write `components` complex fields of `n³` values each (component-major,
/// x-fastest within a component) as little-endian `(re, im)` f64 pairs.
pub fn write_complex_field(path: &Path, n: usize, components: usize, data: &[Complex64]) -> Result<(), GeometryError> {
    if data.len() != components * n * n * n || components > u8::MAX as usize {
        return Err(GeometryError::BadFormat("field length does not match n³ × components".into()));
    }
    let header = VoxelHeader { version: FORMAT_VERSION, n: n as u32, kind: PayloadKind::ComplexF64, components: components as u8 };
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * data.len());
    out.extend_from_slice(&header.to_bytes());
    for z in data {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io_err(path))
}

pub fn read_complex_field(path: &Path) -> Result<(VoxelHeader, Vec<Complex64>), GeometryError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header = VoxelHeader::parse(&bytes)?;
    if header.kind != PayloadKind::ComplexF64 {
        return Err(GeometryError::BadFormat("expected a complex payload".into()));
    }
    let n = header.n as usize;
    let count = n * n * n * header.components as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 16 * count {
        return Err(GeometryError::BadFormat(format!("expected {} payload bytes, found {}", 16 * count, payload.len())));
    }
    let data = payload
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn wire(direction: usize, a: f64, b: f64) -> Wire {
        Wire { direction, position: [a, b] }
    }

    #[test]
    fn small_ball_with_wires_passes() {
        let g = CellGeometry::ball([0.5; 3], 0.2).with_wires(0.05, vec![wire(3, 0.1, 0.1)]);
        let r = validate(&g);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn large_ball_keeps_clear_of_corner_wire() {
        // transverse distance √(0.4²+0.4²) ≈ 0.5657 exceeds r + α = 0.5
        let g = CellGeometry::ball([0.5; 3], 0.45).with_wires(0.05, vec![wire(3, 0.1, 0.1)]);
        let r = validate(&g);
        let c = r.check("wires_disjoint_from_resonator").unwrap();
        assert!(c.passed);
        assert!((c.margin - (0.32f64.sqrt() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn large_ball_hits_nearer_wire() {
        // √(0.3²+0.3²) ≈ 0.4243 < 0.5
        let g = CellGeometry::ball([0.5; 3], 0.45).with_wires(0.05, vec![wire(3, 0.2, 0.2)]);
        let r = validate(&g);
        assert!(!r.check("wires_disjoint_from_resonator").unwrap().passed);
        assert!(!r.passed());
        assert!(r.check("rasterized_overlap").unwrap().margin < 0.0);
    }

    #[test]
    fn wireless_box_passes() {
        let g = CellGeometry {
            resonator: Some(Shape::Box { center: [0.5; 3], half_widths: [0.2, 0.1, 0.3] }),
            wire_radius_alpha: 0.0,
            wires: vec![],
        };
        assert!(validate(&g).passed());
    }

    #[test]
    fn standard_wires_at_one_point_intersect() {
        let g = CellGeometry::empty().with_wires(0.05, CellGeometry::standard_wires(0.1, 0.1));
        assert!(!validate(&g).check("wires_disjoint").unwrap().passed);
    }

    #[test]
    fn staggered_wires_are_disjoint() {
        let g = CellGeometry::ball([0.5; 3], 0.2)
            .with_wires(0.05, vec![wire(1, 0.1, 0.1), wire(2, 0.1, 0.9), wire(3, 0.9, 0.9)]);
        let r = validate(&g);
        assert!(r.passed(), "{r:?}");
        assert!((r.check("wires_disjoint").unwrap().margin - 0.1).abs() < 1e-12);
    }

    #[test]
    fn resonator_touching_boundary_fails() {
        let g = CellGeometry::ball([0.5; 3], 0.5);
        assert!(!validate(&g).check("resonator_contained").unwrap().passed);
    }

    #[test]
    fn two_balls_are_disconnected() {
        let mut labels = vec![Label::Exterior; 16 * 16 * 16];
        labels[3 + 16 * (3 + 16 * 3)] = Label::Resonator;
        labels[9 + 16 * (9 + 16 * 9)] = Label::Resonator;
        let mask = VoxelMask::from_labels(16, labels);
        assert_eq!(mask.resonator_components(), 2);
        let g = CellGeometry {
            resonator: Some(Shape::VoxelMask { path: "m.bin".into(), data: Some(Arc::new(mask)) }),
            wire_radius_alpha: 0.0,
            wires: vec![],
        };
        let r = validate_at(&g, 16);
        assert!(!r.check("resonator_connected").unwrap().passed);
        assert!(r.check("resonator_contained").unwrap().passed);
    }

    #[test]
    fn alpha_out_of_range_fails() {
        let g = CellGeometry::empty().with_wires(0.7, vec![wire(1, 0.5, 0.5)]);
        assert!(!validate(&g).check("wire_radius_range").unwrap().passed);
    }

    #[test]
    fn material_checks() {
        let ok = MaterialParams::new(Complex64::new(25.0, 0.5), Complex64::new(-100.0, 1.0));
        assert!(ok.validate().is_empty());
        assert!(!ok.is_lossless());
        let bad = MaterialParams::new(Complex64::new(25.0, -0.5), Complex64::new(-100.0, 1.0));
        assert_eq!(bad.validate()[0].0, "materials.eps_b");
        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(json, r#"{"eps_b":[25.0,0.5],"eps_w":[-100.0,1.0],"eps0":1.0,"mu0":1.0}"#);
    }

    #[test]
    fn ball_volume_fraction() {
        let mask = rasterize(&CellGeometry::ball([0.5; 3], 0.25), 32).unwrap();
        let exact = 4.0 / 3.0 * PI * 0.25f64.powi(3);
        let f = mask.volume_fraction(Label::Resonator);
        assert!((f / exact - 1.0).abs() < 0.10, "{f} vs {exact}");
    }

    #[test]
    fn ball_volume_converges_under_refinement() {
        let exact = 4.0 / 3.0 * PI * 0.3f64.powi(3);
        let errs: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&n| {
                let f = rasterize(&CellGeometry::ball([0.5; 3], 0.3), n).unwrap().volume_fraction(Label::Resonator);
                (f - exact).abs()
            })
            .collect();
        assert!(errs[2] < errs[0], "{errs:?}");
    }

    #[test]
    fn no_wires_without_radius() {
        let g = CellGeometry::ball([0.5; 3], 0.2).with_wires(0.0, vec![wire(3, 0.1, 0.1)]);
        let mask = rasterize(&g, 16).unwrap();
        assert_eq!(mask.count(Label::Wire1) + mask.count(Label::Wire2) + mask.count(Label::Wire3), 0);
    }

    #[test]
    fn wire_cylinder_volume() {
        let g = CellGeometry::empty().with_wires(0.1, vec![wire(3, 0.5, 0.5)]);
        let mask = rasterize(&g, 64).unwrap();
        let exact = PI * 0.01;
        let f = mask.volume_fraction(Label::Wire3);
        assert!((f / exact - 1.0).abs() < 0.15, "{f} vs {exact}");
    }

    #[test]
    fn unresolved_wire_is_reported() {
        let g = CellGeometry::empty().with_wires(0.02, vec![wire(1, 0.1, 0.1)]);
        assert!(matches!(rasterize(&g, 8), Err(GeometryError::ResolutionTooCoarse { direction: 1, .. })));
    }

    #[test]
    fn rejects_tiny_grid() {
        assert!(matches!(rasterize(&CellGeometry::empty(), 4), Err(GeometryError::GridTooSmall { n: 4 })));
    }

    #[test]
    fn label_round_trip() {
        let g = CellGeometry::ball([0.5; 3], 0.3).with_wires(0.05, vec![wire(2, 0.1, 0.1)]);
        let mask = rasterize(&g, 12).unwrap();
        let bytes = encode_labels(&mask);
        assert_eq!(bytes.len(), HEADER_LEN + 12 * 12 * 12);
        assert_eq!(&bytes[..16], &[b'M', b'H', b'V', b'X', 1, 0, 12, 0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(decode_labels(&bytes).unwrap(), VoxelMask::from_labels(12, mask.labels().to_vec()));
    }

    #[test]
    fn complex_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let data: Vec<Complex64> = (0..2 * 8 * 8 * 8).map(|i| Complex64::new(i as f64, -0.5 * i as f64)).collect();
        write_complex_field(&path, 8, 2, &data).unwrap();
        let (h, back) = read_complex_field(&path).unwrap();
        assert_eq!(h.components, 2);
        assert_eq!(back, data);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let mask = rasterize(&CellGeometry::empty(), 8).unwrap();
        let mut bytes = encode_labels(&mask);
        bytes[0] = b'X';
        assert!(decode_labels(&bytes).is_err());
        let mut bytes = encode_labels(&mask);
        bytes[13] = 1;
        assert!(decode_labels(&bytes).is_err());
        let bytes = encode_labels(&mask);
        assert!(decode_labels(&bytes[..100]).is_err());
    }

    #[test]
    fn mask_shape_resamples() {
        let fine = rasterize(&CellGeometry::ball([0.5; 3], 0.3), 16).unwrap();
        let g = CellGeometry {
            resonator: Some(Shape::VoxelMask { path: "x".into(), data: Some(Arc::new(fine.clone())) }),
            wire_radius_alpha: 0.0,
            wires: vec![],
        };
        assert_eq!(rasterize(&g, 16).unwrap().labels(), fine.labels());
    }

    proptest! {
        #[test]
        fn rasterize_is_pure(r in 0.05f64..0.45, cx in 0.3f64..0.7) {
            let g = CellGeometry::ball([cx, 0.5, 0.5], r);
            prop_assert_eq!(rasterize(&g, 12).unwrap(), rasterize(&g, 12).unwrap());
        }

        #[test]
        fn lattice_translation_preserves_counts(r in 0.05f64..0.45, shift in 0usize..16, axis in 0usize..3) {
            let n = 16;
            let g = CellGeometry::ball([0.5; 3], r);
            let mut c = [0.5; 3];
            c[axis] += shift as f64 / n as f64;
            let moved = CellGeometry::ball(c, r);
            prop_assert_eq!(
                rasterize(&g, n).unwrap().count(Label::Resonator),
                rasterize(&moved, n).unwrap().count(Label::Resonator)
            );
        }
    }
}
