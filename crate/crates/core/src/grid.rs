//! Uniform Cartesian grids, second-order stencils, midpoint quadrature and
//! the ball families that stand in for "all balls" in oscillation suprema.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{packed_index, SymMat, MAX_DIM};
use crate::par;

/// Default number of prescribed node rings around the interior.
pub const BOUNDARY_WIDTH: usize = 2;
/// Smallest accepted `nodes_per_axis` for [`make_grid`].
pub const MIN_NODES_PER_AXIS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Interior,
    Boundary,
    Ghost,
}

/// Node layout shared by every field on a grid. Grids are centered at the
/// origin, with the same node count and spacing on every axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry {
    dim: usize,
    nodes: usize,
    h: f64,
    boundary_width: usize,
    strides: [usize; MAX_DIM],
}

impl GridGeometry {
    pub fn new(dim: usize, nodes: usize, h: f64, boundary_width: usize) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::Grid(format!("dimension {dim} not in {{2, 3}}")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Grid(format!("spacing {h} must be positive")));
        }
        if boundary_width < 2 {
            return Err(Error::Grid(format!("boundary width {boundary_width} < 2")));
        }
        if nodes < 2 * boundary_width + 3 {
            return Err(Error::Grid(format!(
                "{nodes} nodes per axis is too few for boundary width {boundary_width}"
            )));
        }
        let mut strides = [0; MAX_DIM];
        let mut s = 1;
        for a in (0..dim).rev() {
            strides[a] = s;
            s *= nodes;
        }
        Ok(GridGeometry { dim, nodes, h, boundary_width, strides })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    pub fn nodes_per_axis(&self) -> usize {
        self.nodes
    }
    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }
    #[inline]
    pub fn boundary_width(&self) -> usize {
        self.boundary_width
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.pow(self.dim as u32)
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }
    /// Node volume `hⁿ`.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }
    pub fn half_width(&self) -> f64 {
        0.5 * (self.nodes - 1) as f64 * self.h
    }

    #[inline]
    pub fn index(&self, c: &[usize]) -> usize {
        (0..self.dim).map(|a| c[a] * self.strides[a]).sum()
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; MAX_DIM] {
        let mut c = [0; MAX_DIM];
        for a in 0..self.dim {
            c[a] = (idx / self.strides[a]) % self.nodes;
        }
        c
    }

    #[inline]
    pub fn position(&self, idx: usize) -> [f64; MAX_DIM] {
        let c = self.coords(idx);
        let mut x = [0.0; MAX_DIM];
        let o = self.half_width();
        for a in 0..self.dim {
            x[a] = c[a] as f64 * self.h - o;
        }
        x
    }

    /// Index of the node nearest to the physical point `x`.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let o = self.half_width();
        let mut c = [0; MAX_DIM];
        for a in 0..self.dim {
            let i = ((x[a] + o) / self.h).round();
            c[a] = i.clamp(0.0, (self.nodes - 1) as f64) as usize;
        }
        self.index(&c)
    }

    pub fn center_index(&self) -> usize {
        let m = (self.nodes - 1) / 2;
        self.index(&[m; MAX_DIM])
    }

    /// Distance in nodes to the nearest grid edge.
    #[inline]
    pub fn edge_distance(&self, idx: usize) -> usize {
        let c = self.coords(idx);
        (0..self.dim)
            .map(|a| c[a].min(self.nodes - 1 - c[a]))
            .min()
            .unwrap_or(0)
    }

    #[inline]
    pub fn kind(&self, idx: usize) -> NodeKind {
        let d = self.edge_distance(idx);
        if d + 1 < self.boundary_width {
            NodeKind::Ghost
        } else if d + 1 == self.boundary_width {
            NodeKind::Boundary
        } else {
            NodeKind::Interior
        }
    }

    pub fn domain_mask(&self) -> Vec<NodeKind> {
        (0..self.len()).map(|i| self.kind(i)).collect()
    }

    /// Neighbor at an integer offset, if it lies on the grid.
    pub fn offset(&self, idx: usize, off: &[isize]) -> Option<usize> {
        let c = self.coords(idx);
        let mut out = idx as isize;
        for a in 0..self.dim {
            let ca = c[a] as isize + off[a];
            if ca < 0 || ca >= self.nodes as isize {
                return None;
            }
            out += off[a] * self.strides[a] as isize;
        }
        Some(out as usize)
    }

    pub fn interior_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kind(i) == NodeKind::Interior).collect()
    }

    /// Nodes where the second-difference stencil fits on the grid.
    pub fn stencil_region(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.edge_distance(i) >= 1).collect()
    }

    /// Distance from a node to the outermost boundary ring, i.e. the largest
    /// radius whose ball keeps strictly inside the interior plus `h`.
    pub fn interior_clearance(&self, idx: usize) -> f64 {
        let c = self.coords(idx);
        let bw = self.boundary_width;
        let mut m = usize::MAX;
        for a in 0..self.dim {
            let lo = c[a] as isize - (bw as isize - 1);
            let hi = (self.nodes - bw) as isize - c[a] as isize;
            m = m.min(lo.min(hi).max(0) as usize);
        }
        m as f64 * self.h
    }
}

/// Sampled potential `u` on a [`GridGeometry`]. Nodes with `valid == false`
/// carry no value (e.g. after a difference quotient shrinks the region).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    geom: GridGeometry,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl ScalarGrid {
    pub fn zeros(geom: GridGeometry) -> Self {
        let n = geom.len();
        ScalarGrid { geom, values: vec![0.0; n], valid: vec![true; n] }
    }

    pub fn from_values(geom: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geom.len() {
            return Err(Error::Grid(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                geom.len()
            )));
        }
        let valid: Vec<bool> = values.iter().map(|v| !v.is_nan()).collect();
        let values = values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v }).collect();
        Ok(ScalarGrid { geom, values, valid })
    }

    pub fn from_parts(geom: GridGeometry, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != geom.len() || valid.len() != geom.len() {
            return Err(Error::Grid("value/mask length mismatch".into()));
        }
        Ok(ScalarGrid { geom, values, valid })
    }

    /// Samples `f` at every node.
    pub fn sample(geom: GridGeometry, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> Self {
        let values = par::map_range(geom.len(), |i| f(&geom.position(i)[..geom.dim()]));
        let n = geom.len();
        ScalarGrid { geom, values, valid: vec![true; n] }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
    pub fn dim(&self) -> usize {
        self.geom.dim
    }
    pub fn h(&self) -> f64 {
        self.geom.h
    }
    pub fn domain_mask(&self) -> Vec<NodeKind> {
        self.geom.domain_mask()
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Max |a - b| over nodes valid in both grids.
    pub fn max_abs_diff(&self, other: &ScalarGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .zip(self.valid.iter().zip(&other.valid))
            .filter(|(_, (a, b))| **a && **b)
            .fold(0.0_f64, |m, ((x, y), _)| m.max((x - y).abs()))
    }
}

/// Builds a zero potential on `[-half_width, half_width]^dim`.
pub fn make_grid(dim: usize, nodes_per_axis: usize, half_width: f64) -> Result<ScalarGrid> {
    if nodes_per_axis < MIN_NODES_PER_AXIS {
        return Err(Error::Grid(format!(
            "{nodes_per_axis} nodes per axis; at least {MIN_NODES_PER_AXIS} needed"
        )));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::Grid(format!("half width {half_width} must be positive")));
    }
    let h = 2.0 * half_width / (nodes_per_axis - 1) as f64;
    let geom = GridGeometry::new(dim, nodes_per_axis, h, BOUNDARY_WIDTH)?;
    Ok(ScalarGrid::zeros(geom))
}

/// Grid of symmetric matrices; `region[i]` marks nodes carrying data.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatField {
    geom: GridGeometry,
    data: Vec<SymMat>,
    region: Vec<bool>,
}

impl SymMatField {
    pub fn new(geom: GridGeometry, data: Vec<SymMat>, region: Vec<bool>) -> Result<Self> {
        if data.len() != geom.len() || region.len() != geom.len() {
            return Err(Error::Grid("field length mismatch".into()));
        }
        if data.iter().any(|m| m.dim() != geom.dim()) {
            return Err(Error::Grid("matrix dimension differs from grid dimension".into()));
        }
        Ok(SymMatField { geom, data, region })
    }

    /// Samples `f` at every node; the region is the whole grid.
    pub fn sample(geom: GridGeometry, f: impl Fn(&[f64]) -> SymMat + Sync + Send) -> Self {
        let data = par::map_range(geom.len(), |i| f(&geom.position(i)[..geom.dim()]));
        let n = geom.len();
        SymMatField { geom, data, region: vec![true; n] }
    }

    pub fn constant(geom: GridGeometry, m: SymMat) -> Self {
        let n = geom.len();
        SymMatField { geom, data: vec![m; n], region: vec![true; n] }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }
    pub fn data(&self) -> &[SymMat] {
        &self.data
    }
    pub fn region(&self) -> &[bool] {
        &self.region
    }
    #[inline]
    pub fn at(&self, idx: usize) -> &SymMat {
        &self.data[idx]
    }
    pub fn dim(&self) -> usize {
        self.geom.dim
    }

    /// Node-wise map preserving the region.
    pub fn map(&self, f: impl Fn(&SymMat) -> SymMat + Sync + Send) -> SymMatField {
        let data = par::map_range(self.data.len(), |i| {
            if self.region[i] {
                f(&self.data[i])
            } else {
                SymMat::zeros(self.geom.dim)
            }
        });
        SymMatField { geom: self.geom.clone(), data, region: self.region.clone() }
    }

    /// `self - other` on the intersection of the regions.
    pub fn sub(&self, other: &SymMatField) -> Result<SymMatField> {
        if self.geom != other.geom {
            return Err(Error::RegionMismatch("fields live on different grids".into()));
        }
        let n = self.data.len();
        let region: Vec<bool> = (0..n).map(|i| self.region[i] && other.region[i]).collect();
        let data = (0..n)
            .map(|i| if region[i] { self.data[i] - other.data[i] } else { SymMat::zeros(self.geom.dim) })
            .collect();
        Ok(SymMatField { geom: self.geom.clone(), data, region })
    }

    /// Restricts the region to nodes satisfying `keep`.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> SymMatField {
        let region: Vec<bool> = (0..self.data.len()).map(|i| self.region[i] && keep(i)).collect();
        let zero = SymMat::zeros(self.geom.dim);
        let data = self.data.iter().zip(&region).map(|(m, &r)| if r { *m } else { zero }).collect();
        SymMatField { geom: self.geom.clone(), data, region }
    }
}

/// Second-order central-difference Hessian at a node whose 3ⁿ neighborhood
/// lies on the grid.
#[inline]
pub fn hessian_at(geom: &GridGeometry, v: &[f64], idx: usize) -> SymMat {
    let n = geom.dim;
    let inv_h2 = 1.0 / (geom.h * geom.h);
    let mut m = SymMat::zeros(n);
    let e = m.packed_mut();
    for i in 0..n {
        let si = geom.strides[i];
        e[packed_index(n, i, i)] = (v[idx + si] - 2.0 * v[idx] + v[idx - si]) * inv_h2;
        for j in (i + 1)..n {
            let sj = geom.strides[j];
            e[packed_index(n, i, j)] = (v[idx + si + sj] - v[idx + si - sj] - v[idx - si + sj]
                + v[idx - si - sj])
                * (0.25 * inv_h2);
        }
    }
    m
}

/// Adjoint of [`hessian_at`] summed over all entries: `Σᵢ Dᵢᵢ Aᵢᵢ + 2 Σ_{i<j} Dᵢⱼ Aᵢⱼ`
/// evaluated at `idx`. `a` must be zero wherever the Hessian pairing does not
/// run, and `idx` must be at least one node away from the grid edge.
#[inline]
pub fn double_divergence_at(geom: &GridGeometry, a: &[SymMat], idx: usize) -> f64 {
    let n = geom.dim;
    let inv_h2 = 1.0 / (geom.h * geom.h);
    let mut s = 0.0;
    for i in 0..n {
        let si = geom.strides[i];
        let p = packed_index(n, i, i);
        s += (a[idx + si].packed()[p] - 2.0 * a[idx].packed()[p] + a[idx - si].packed()[p]) * inv_h2;
        for j in (i + 1)..n {
            let sj = geom.strides[j];
            let q = packed_index(n, i, j);
            s += 2.0
                * (a[idx + si + sj].packed()[q] - a[idx + si - sj].packed()[q]
                    - a[idx - si + sj].packed()[q]
                    + a[idx - si - sj].packed()[q])
                * (0.25 * inv_h2);
        }
    }
    s
}

fn stencil_valid(geom: &GridGeometry, valid: &[bool], idx: usize) -> bool {
    if geom.edge_distance(idx) < 1 {
        return false;
    }
    let n = geom.dim;
    let mut off = [-1isize; MAX_DIM];
    loop {
        let j = geom.offset(idx, &off[..n]).expect("interior offset");
        if !valid[j] {
            return false;
        }
        let mut a = 0;
        loop {
            if a == n {
                return true;
            }
            off[a] += 1;
            if off[a] <= 1 {
                break;
            }
            off[a] = -1;
            a += 1;
        }
    }
}

/// Discrete Hessian `D²u` on every node whose stencil is fully valid.
pub fn hessian_field(u: &ScalarGrid) -> SymMatField {
    let geom = &u.geom;
    let region: Vec<bool> = par::map_range(geom.len(), |i| stencil_valid(geom, &u.valid, i));
    let data = par::map_range(geom.len(), |i| {
        if region[i] {
            hessian_at(geom, &u.values, i)
        } else {
            SymMat::zeros(geom.dim)
        }
    });
    SymMatField { geom: geom.clone(), data, region }
}

/// Forward difference quotient `(u(x + q·h·e_m) − u(x)) / (q·h)`.
pub fn difference_quotient(u: &ScalarGrid, direction: usize, step: f64) -> Result<ScalarGrid> {
    let geom = &u.geom;
    if direction >= geom.dim {
        return Err(Error::InvalidArgument(format!("direction {direction} out of range")));
    }
    let ratio = step / geom.h;
    let q = ratio.round();
    if !(q >= 1.0) || (ratio - q).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "step {step} is not a positive multiple of the spacing {}",
            geom.h
        )));
    }
    let q = q as usize;
    if q > geom.boundary_width {
        return Err(Error::InvalidArgument(format!(
            "shift of {q} nodes exceeds the {} prescribed rings",
            geom.boundary_width
        )));
    }
    let mut off = [0isize; MAX_DIM];
    off[direction] = q as isize;
    let inv = 1.0 / (q as f64 * geom.h);
    let pairs: Vec<(f64, bool)> = par::map_range(geom.len(), |i| match geom.offset(i, &off[..geom.dim]) {
        Some(j) if u.valid[i] && u.valid[j] => ((u.values[j] - u.values[i]) * inv, true),
        _ => (0.0, false),
    });
    let (values, valid) = pairs.into_iter().unzip();
    Ok(ScalarGrid { geom: geom.clone(), values, valid })
}

/// Euclidean ball centered at a grid node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<usize>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<usize>, radius: f64) -> Self {
        Ball { center, radius }
    }

    /// Ball around the node nearest to a physical point.
    pub fn at_point(geom: &GridGeometry, x: &[f64], radius: f64) -> Self {
        let idx = geom.nearest(x);
        Ball { center: geom.coords(idx)[..geom.dim].to_vec(), radius }
    }

    pub fn center_index(&self, geom: &GridGeometry) -> usize {
        geom.index(&self.center)
    }

    pub fn center_position(&self, geom: &GridGeometry) -> Vec<f64> {
        geom.position(self.center_index(geom))[..geom.dim].to_vec()
    }

    /// Grid nodes with `|x - x₀| ≤ r`.
    pub fn nodes(&self, geom: &GridGeometry) -> Vec<usize> {
        let n = geom.dim;
        if !(self.radius >= 0.0) {
            return Vec::new();
        }
        let reach = (self.radius / geom.h + 1e-9).floor() as isize;
        let r2 = (self.radius / geom.h).powi(2) * (1.0 + 1e-12);
        let mut out = Vec::new();
        let mut off = [-reach; MAX_DIM];
        for a in n..MAX_DIM {
            off[a] = 0;
        }
        loop {
            let d2: f64 = (0..n).map(|a| (off[a] * off[a]) as f64).sum();
            if d2 <= r2 {
                let mut ok = true;
                let mut c = [0usize; MAX_DIM];
                for a in 0..n {
                    let ca = self.center[a] as isize + off[a];
                    if ca < 0 || ca >= geom.nodes as isize {
                        ok = false;
                        break;
                    }
                    c[a] = ca as usize;
                }
                if ok {
                    out.push(geom.index(&c[..n]));
                }
            }
            let mut a = 0;
            loop {
                if a == n {
                    return out;
                }
                off[a] += 1;
                if off[a] <= reach {
                    break;
                }
                off[a] = -reach;
                a += 1;
            }
        }
    }

    /// Checks that every node of the ball is interior and the ball is nonempty.
    pub fn validate(&self, geom: &GridGeometry) -> Result<()> {
        if self.center.len() != geom.dim {
            return Err(Error::BallFamily("center dimension mismatch".into()));
        }
        if !(self.radius >= 0.0) {
            return Err(Error::BallFamily(format!("radius {} is negative", self.radius)));
        }
        let idx = self.center_index(geom);
        if self.radius >= geom.interior_clearance(idx) {
            return Err(Error::BallFamily(format!(
                "ball of radius {} at {:?} leaves the interior",
                self.radius, self.center
            )));
        }
        if geom.kind(idx) != NodeKind::Interior {
            return Err(Error::BallFamily("ball center is not an interior node".into()));
        }
        Ok(())
    }
}

/// Finite family of balls standing in for the supremum over all balls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallFamily {
    pub balls: Vec<Ball>,
    pub center_stride: Option<usize>,
    pub r_min: f64,
    pub r_max: f64,
}

impl BallFamily {
    pub fn len(&self) -> usize {
        self.balls.len()
    }
    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }
}

/// Dyadic radii `r_max, r_max/2, …` down to `r_min`.
pub fn dyadic_radii(r_min: f64, r_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = r_max;
    while r >= r_min * (1.0 - 1e-12) {
        out.push(r);
        r *= 0.5;
    }
    out
}

/// Dyadic balls at interior centers spaced `center_stride` nodes apart
/// (symmetric about the grid center; `None` means the center node only).
/// Radii that do not fit inside the interior at a given center are dropped.
pub fn ball_family(
    geom: &GridGeometry,
    center_stride: Option<usize>,
    r_min: f64,
    r_max: f64,
) -> Result<BallFamily> {
    if !(r_min <= r_max) {
        return Err(Error::BallFamily(format!("r_min {r_min} exceeds r_max {r_max}")));
    }
    if r_min < 3.0 * geom.h * (1.0 - 1e-12) {
        return Err(Error::BallFamily(format!("r_min {r_min} is below three grid spacings")));
    }
    let inradius = geom.interior_clearance(geom.center_index());
    if r_max >= inradius {
        return Err(Error::BallFamily(format!(
            "r_max {r_max} does not fit in the interior (clearance {inradius})"
        )));
    }
    let radii = dyadic_radii(r_min, r_max);
    let mid = (geom.nodes - 1) / 2;
    let centers: Vec<usize> = match center_stride {
        None => vec![geom.center_index()],
        Some(0) => return Err(Error::BallFamily("center stride must be positive".into())),
        Some(s) => (0..geom.len())
            .filter(|&i| {
                geom.kind(i) == NodeKind::Interior
                    && geom.coords(i)[..geom.dim].iter().all(|&c| c.abs_diff(mid) % s == 0)
            })
            .collect(),
    };
    let mut balls = Vec::new();
    for &c in &centers {
        let clearance = geom.interior_clearance(c);
        for &r in &radii {
            if r < clearance {
                balls.push(Ball { center: geom.coords(c)[..geom.dim].to_vec(), radius: r });
            }
        }
    }
    if balls.is_empty() {
        return Err(Error::BallFamily("no ball fits".into()));
    }
    Ok(BallFamily { balls, center_stride, r_min, r_max })
}

/// Integration domain for [`integrate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// Interior nodes only.
    Interior,
    /// Every node of the grid.
    All,
    Ball(Ball),
}

pub fn region_nodes(geom: &GridGeometry, region: &Region) -> Vec<usize> {
    match region {
        Region::Interior => geom.interior_indices(),
        Region::All => (0..geom.len()).collect(),
        Region::Ball(b) => b.nodes(geom),
    }
}

/// Midpoint rule: `hⁿ Σ f(x)` over the nodes of `region`.
pub fn integrate(geom: &GridGeometry, values: &[f64], region: &Region) -> Result<f64> {
    let nodes = region_nodes(geom, region);
    if nodes.is_empty() {
        return Err(Error::EmptyRegion(format!("{region:?}")));
    }
    Ok(geom.cell_volume() * par::sum_range(nodes.len(), |k| values[nodes[k]]))
}

/// One compactly supported discrete test function.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    /// `(node, value)` pairs; all other nodes are zero.
    pub support: Vec<(usize, f64)>,
}

/// Compactly supported test functions vanishing outside the interior.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunctionSet {
    pub tests: Vec<TestFunction>,
    pub description: String,
}

impl TestFunctionSet {
    fn checked(geom: &GridGeometry, tests: Vec<TestFunction>, description: String) -> Result<Self> {
        for t in &tests {
            if let Some(&(i, _)) = t.support.iter().find(|(i, v)| *v != 0.0 && geom.kind(*i) != NodeKind::Interior) {
                return Err(Error::InvalidArgument(format!(
                    "test function is nonzero at non-interior node {:?}",
                    &geom.coords(i)[..geom.dim]
                )));
            }
        }
        Ok(TestFunctionSet { tests, description })
    }

    /// Discrete delta at each listed node.
    pub fn nodal(geom: &GridGeometry, nodes: &[usize]) -> Result<Self> {
        let tests = nodes.iter().map(|&i| TestFunction { support: vec![(i, 1.0)] }).collect();
        Self::checked(geom, tests, format!("nodal hats at {} nodes", nodes.len()))
    }

    /// Bumps `(1 - |x - c|²/s²)⁴` of radius `scale` at each center.
    pub fn smooth_bumps(geom: &GridGeometry, centers: &[Vec<f64>], scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument("bump scale must be positive".into()));
        }
        let tests = centers
            .iter()
            .map(|c| {
                let ball = Ball::at_point(geom, c, scale);
                let support = ball
                    .nodes(geom)
                    .into_iter()
                    .filter_map(|i| {
                        let x = geom.position(i);
                        let r2: f64 = (0..geom.dim).map(|a| (x[a] - c[a]).powi(2)).sum::<f64>() / (scale * scale);
                        (r2 < 1.0).then(|| (i, (1.0 - r2).powi(4)))
                    })
                    .collect();
                TestFunction { support }
            })
            .collect();
        Self::checked(geom, tests, format!("{} smooth bumps of radius {scale}", centers.len()))
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }
}

impl TestFunction {
    pub fn dense(&self, geom: &GridGeometry) -> Vec<f64> {
        let mut v = vec![0.0; geom.len()];
        for &(i, x) in &self.support {
            v[i] = x;
        }
        v
    }

    /// Nodes where `D²η` can be nonzero (support dilated by one node).
    pub fn hessian_support(&self, geom: &GridGeometry) -> Vec<usize> {
        let n = geom.dim;
        let mut out: Vec<usize> = Vec::new();
        for &(i, _) in &self.support {
            let mut off = [-1isize; MAX_DIM];
            for a in n..MAX_DIM {
                off[a] = 0;
            }
            loop {
                if let Some(j) = geom.offset(i, &off[..n]) {
                    out.push(j);
                }
                let mut a = 0;
                loop {
                    if a == n {
                        break;
                    }
                    off[a] += 1;
                    if off[a] <= 1 {
                        break;
                    }
                    off[a] = -1;
                    a += 1;
                }
                if a == n {
                    break;
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// `Σ |η(x)|`, the discrete L¹ mass without the `hⁿ` factor.
    pub fn l1(&self) -> f64 {
        self.support.iter().map(|(_, v)| v.abs()).sum()
    }
}
