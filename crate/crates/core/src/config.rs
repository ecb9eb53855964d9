//! Run configuration: flat `key = value` sections in TOML syntax.
//!
//! ```toml
//! [run]
//! seed = 7
//!
//! [model]
//! kind = "area"
//! eta = 0.1
//!
//! [grid]
//! n = 2
//! nodes = 65
//!
//! [boundary]
//! function = "x1^3*x2"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{default_p0_scan, DEFAULT_K_MAX};
use crate::energy::{CoefficientTable, EnergyModel};
use crate::error::{Error, Result};
use crate::grid::{make_grid, GridGeometry, ScalarGrid, MIN_NODES_PER_AXIS};
use crate::io::{read_file, GridFile};
use crate::solver::{ClampedBoundaryData, SolveOptions};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSpec,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub boundary: BoundarySpec,
    pub solver: SolverSpec,
    pub diagnostics: DiagnosticsSpec,
    pub hamstat: HamstatSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    #[default]
    Quadratic,
    Area,
    Table,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelName,
    /// Margin: the admissible set is `‖M‖_op ≤ 1 − η`.
    pub eta: Option<f64>,
    /// Admissible radius, when `eta` is not given.
    pub radius: Option<f64>,
    /// Coefficient table CSV for `kind = "table"`.
    pub table: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n: usize,
    pub nodes: usize,
    pub half_width: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n: 2, nodes: 65, half_width: 1.0 }
    }
}

/// Closed-form potentials available as boundary data and fixtures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NamedFunction {
    #[serde(rename = "zero")]
    Zero,
    /// `x₁² − x₁x₂ + 2x₂² (+ x₃²)`.
    #[serde(rename = "quadratic")]
    Quadratic,
    #[default]
    #[serde(rename = "x1^3*x2")]
    CubicProduct,
    /// `x₁³ − 3x₁x₂²`.
    #[serde(rename = "harmonic-cubic")]
    HarmonicCubic,
    /// `|x|² e^{x₁} cos x₂`.
    #[serde(rename = "r2-exp-cos")]
    R2ExpCos,
    /// `e^{x₁} sin x₂`.
    #[serde(rename = "exp-sin")]
    ExpSin,
}

impl NamedFunction {
    pub fn eval(self, x: &[f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        match self {
            NamedFunction::Zero => 0.0,
            NamedFunction::Quadratic => a * a - a * b + 2.0 * b * b + x.get(2).map_or(0.0, |c| c * c),
            NamedFunction::CubicProduct => a * a * a * b,
            NamedFunction::HarmonicCubic => a * a * a - 3.0 * a * b * b,
            NamedFunction::R2ExpCos => x.iter().map(|v| v * v).sum::<f64>() * a.exp() * b.cos(),
            NamedFunction::ExpSin => a.exp() * b.sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySpec {
    pub function: NamedFunction,
    pub amplitude: f64,
    /// Grid file whose values supply the data instead of `function`.
    pub file: Option<PathBuf>,
}

impl Default for BoundarySpec {
    fn default() -> Self {
        BoundarySpec { function: NamedFunction::default(), amplitude: 1.0, file: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub grad_tol: Option<f64>,
    pub max_iter: usize,
    pub cg_tol: f64,
    pub cg_max_iter: Option<usize>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = SolveOptions::default();
        SolverSpec { grad_tol: d.grad_tol, max_iter: d.max_iter, cg_tol: d.cg_tol, cg_max_iter: d.cg_max_iter }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSpec {
    /// Potential or matrix-field grid file to analyze.
    pub field: Option<PathBuf>,
    /// Ball-center spacing in nodes; default picks about eight centers per axis.
    pub center_stride: Option<usize>,
    /// Smallest ball radius; default `max(3h, half_width/16)`.
    pub r_min: Option<f64>,
    /// Largest ball radius; default `half_width/4`.
    pub r_max: Option<f64>,
    /// Balls must lie inside `|x| ≤ inner_fraction · half_width`.
    pub inner_fraction: f64,
    /// Exponent of the John–Nirenberg ratio.
    pub jn_p: f64,
    pub campanato_p: Vec<f64>,
    pub campanato_centers: Vec<Vec<f64>>,
    pub campanato_radii: Vec<f64>,
    pub gehring_centers: Vec<Vec<f64>>,
    pub gehring_scales: Vec<f64>,
    /// Radii of the `p₀` scan, centered at the origin.
    pub p0_radii: Vec<f64>,
    pub p0_scan: Vec<f64>,
    pub k_max: f64,
    /// Exponent of the singular-set density; default the `p₀` estimate.
    pub sigma_p0: Option<f64>,
    /// Threshold; default `tau_rel · |B₁| · (max |f − mean f|)^{p₀}`.
    pub tau: Option<f64>,
    pub tau_rel: f64,
    /// Decreasing radii; default `6h, 3h`.
    pub sigma_radii: Option<Vec<f64>>,
    pub alpha: f64,
    pub holder_pairs: usize,
    /// `ω` at or below this value is reported as the small-BMO regime.
    pub omega_threshold: f64,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        DiagnosticsSpec {
            field: None,
            center_stride: None,
            r_min: None,
            r_max: None,
            inner_fraction: 0.5,
            jn_p: 2.0,
            campanato_p: vec![2.0],
            campanato_centers: vec![vec![0.0, 0.0]],
            campanato_radii: vec![0.25, 0.125, 0.0625, 0.03125],
            gehring_centers: vec![vec![0.0, 0.0]],
            gehring_scales: vec![0.0625, 0.125, 0.25],
            p0_radii: vec![0.5, 0.25, 0.125, 0.0625],
            p0_scan: default_p0_scan(),
            k_max: DEFAULT_K_MAX,
            sigma_p0: None,
            tau: None,
            tau_rel: 0.4,
            sigma_radii: None,
            alpha: 0.5,
            holder_pairs: 2000,
            omega_threshold: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HamstatSpec {
    pub eta: f64,
    pub samples: usize,
    /// Dimensions of the convexity certificate; default the grid dimension.
    pub dims: Vec<usize>,
    /// Potential analyzed; defaults to the boundary function.
    pub potential: Option<NamedFunction>,
    pub amplitude: Option<f64>,
    /// Radius of the bump test functions, relative to the half-width.
    pub bump_scale: f64,
}

impl Default for HamstatSpec {
    fn default() -> Self {
        HamstatSpec { eta: 0.1, samples: 10_000, dims: Vec::new(), potential: None, amplitude: None, bump_scale: 0.25 }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl RunConfig {
    /// Parses and validates `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (l, c) = line_col(text, span.start);
                    Error::Config(format!("line {l}, column {c}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.run.out);
        fix(&mut self.model.table);
        fix(&mut self.boundary.file);
        fix(&mut self.diagnostics.field);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let g = &self.grid;
        if !(2..=3).contains(&g.n) {
            return bad(format!("grid.n = {} must be 2 or 3", g.n));
        }
        if g.nodes < MIN_NODES_PER_AXIS {
            return bad(format!("grid.nodes = {} must be at least {MIN_NODES_PER_AXIS}", g.nodes));
        }
        if !(g.half_width > 0.0 && g.half_width.is_finite()) {
            return bad(format!("grid.half_width = {} must be positive", g.half_width));
        }
        let m = &self.model;
        if let Some(eta) = m.eta {
            if !(eta > 0.0 && eta < 1.0) {
                return bad(format!("model.eta = {eta} must lie in (0, 1)"));
            }
        }
        if let Some(r) = m.radius {
            if !(r >= 0.0) {
                return bad(format!("model.radius = {r} must be nonnegative"));
            }
        }
        if m.eta.is_some() && m.radius.is_some() {
            return bad("model.eta and model.radius are mutually exclusive".into());
        }
        if m.kind == ModelName::Table && m.table.is_none() {
            return bad("model.kind = \"table\" needs model.table".into());
        }
        for (key, p) in [("model.table", &m.table), ("boundary.file", &self.boundary.file), ("diagnostics.field", &self.diagnostics.field)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{key}: file {} does not exist", p.display()));
                }
            }
        }
        if !self.boundary.amplitude.is_finite() {
            return bad("boundary.amplitude must be finite".into());
        }
        let s = &self.solver;
        if let Some(t) = s.grad_tol {
            if !(t > 0.0) {
                return bad(format!("solver.grad_tol = {t} must be positive"));
            }
        }
        if !(s.cg_tol > 0.0 && s.cg_tol < 1.0) {
            return bad(format!("solver.cg_tol = {} must lie in (0, 1)", s.cg_tol));
        }
        let d = &self.diagnostics;
        if !(d.alpha > 0.0 && d.alpha < 1.0) {
            return bad(format!("diagnostics.alpha = {} must lie in (0, 1)", d.alpha));
        }
        for (key, ps) in [("diagnostics.jn_p", vec![d.jn_p]), ("diagnostics.campanato_p", d.campanato_p.clone()), ("diagnostics.p0_scan", d.p0_scan.clone())] {
            if let Some(p) = ps.iter().find(|p| !(**p >= 1.0 && p.is_finite())) {
                return bad(format!("{key}: exponent {p} must be at least 1"));
            }
        }
        if let Some(p) = d.sigma_p0 {
            if !(p >= 1.0) {
                return bad(format!("diagnostics.sigma_p0 = {p} must be at least 1"));
            }
        }
        if d.p0_scan.is_empty() {
            return bad("diagnostics.p0_scan is empty".into());
        }
        if !(d.inner_fraction > 0.0 && d.inner_fraction <= 1.0) {
            return bad(format!("diagnostics.inner_fraction = {} must lie in (0, 1]", d.inner_fraction));
        }
        if let Some(t) = d.tau {
            if !(t >= 0.0) {
                return bad(format!("diagnostics.tau = {t} must be nonnegative"));
            }
        }
        for (key, cs) in [("diagnostics.campanato_centers", &d.campanato_centers), ("diagnostics.gehring_centers", &d.gehring_centers)] {
            if cs.iter().any(|c| c.len() != g.n) {
                return bad(format!("{key}: every center needs {} coordinates", g.n));
            }
        }
        let h = &self.hamstat;
        if !(h.eta > 0.0 && h.eta < 1.0) {
            return bad(format!("hamstat.eta = {} must lie in (0, 1)", h.eta));
        }
        if h.samples == 0 {
            return bad("hamstat.samples must be positive".into());
        }
        if let Some(k) = h.dims.iter().find(|k| !(2..=3).contains(*k)) {
            return bad(format!("hamstat.dims entry {k} must be 2 or 3"));
        }
        if !(h.bump_scale > 0.0 && h.bump_scale < 0.5) {
            return bad(format!("hamstat.bump_scale = {} must lie in (0, 0.5)", h.bump_scale));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        Ok(make_grid(self.grid.n, self.grid.nodes, self.grid.half_width)?.geometry().clone())
    }

    /// Admissible radius: `1 − η`, the given radius, or unbounded.
    pub fn admissible_radius(&self) -> f64 {
        match (self.model.eta, self.model.radius) {
            (Some(eta), _) => 1.0 - eta,
            (None, Some(r)) => r,
            (None, None) if self.model.kind == ModelName::Area => 1.0,
            _ => f64::INFINITY,
        }
    }

    pub fn energy_model(&self) -> Result<EnergyModel> {
        let n = self.grid.n;
        let rho = self.admissible_radius();
        Ok(match self.model.kind {
            ModelName::Quadratic => EnergyModel::quadratic(n),
            ModelName::Area => EnergyModel::area(n, rho),
            ModelName::Table => {
                let path = self.model.table.as_ref().expect("validated");
                let file = fs::File::open(path)?;
                let table = CoefficientTable::from_csv(std::io::BufReader::new(file))?;
                if table.dim != n {
                    return Err(Error::Config(format!("table dimension {} differs from grid.n = {n}", table.dim)));
                }
                EnergyModel::from_table(table, rho)
            }
        })
    }

    /// The boundary potential sampled on the grid, scaled by the amplitude.
    pub fn boundary_potential(&self, geom: &GridGeometry) -> Result<ScalarGrid> {
        let a = self.boundary.amplitude;
        match &self.boundary.file {
            Some(path) => match read_file(path)? {
                GridFile::Scalar(u) => {
                    if u.geometry() != geom {
                        return Err(Error::RegionMismatch(format!("{} does not match the configured grid", path.display())));
                    }
                    let vals = u.values().iter().map(|v| a * v).collect();
                    ScalarGrid::from_parts(geom.clone(), vals, u.valid().to_vec())
                }
                _ => Err(Error::Format(format!("{} does not hold a potential", path.display()))),
            },
            None => {
                let f = self.boundary.function;
                Ok(ScalarGrid::sample(geom.clone(), move |x| a * f.eval(x)))
            }
        }
    }

    pub fn boundary_data(&self, geom: &GridGeometry) -> Result<ClampedBoundaryData> {
        ClampedBoundaryData::from_grid(&self.boundary_potential(geom)?)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            grad_tol: self.solver.grad_tol,
            max_iter: self.solver.max_iter,
            cg_tol: self.solver.cg_tol,
            cg_max_iter: self.solver.cg_max_iter,
            ..SolveOptions::default()
        }
    }
}
