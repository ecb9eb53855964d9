//! Discrete energy, weak Euler–Lagrange residuals, the clamped minimizer and
//! the constant-coefficient comparison problem.
//!
//! The discrete energy is `E(u) = hⁿ Σ_{x ∈ Q} F(D²_h u(x))` where `Q` is the
//! set of nodes at least one node away from the grid edge. Interior nodes are
//! the unknowns; the two outer rings carry the clamped data.

use serde::Serialize;

use crate::energy::{linearized_coefficients, DoubleDivergenceModel, EnergyModel, DEFAULT_QUAD_NODES};
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, NodeKind, ScalarGrid, TestFunction, TestFunctionSet};
use crate::linalg::{packed_index, SymMat, Tensor4, MAX_DIM};
use crate::par;

/// Admissibility margin kept by Newton iterates.
pub const ADMISSIBILITY_MARGIN: f64 = 1e-6;
/// Relative tolerance of the comparison-problem CG solve.
pub const BVP_CG_TOL: f64 = 1e-12;

/// Prescribed values on the ghost and boundary rings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClampedBoundaryData {
    geom: GridGeometry,
    values: Vec<f64>,
}

impl ClampedBoundaryData {
    /// Samples `g` on the two outer rings.
    pub fn from_fn(geom: &GridGeometry, g: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = geom.dim();
        let values: Vec<f64> = (0..geom.len())
            .map(|i| if geom.kind(i) == NodeKind::Interior { 0.0 } else { g(&geom.position(i)[..n]) })
            .collect();
        Self::checked(geom.clone(), values)
    }

    /// Takes the ring values of `u`.
    pub fn from_grid(u: &ScalarGrid) -> Result<Self> {
        let geom = u.geometry();
        let mut values = vec![0.0; geom.len()];
        for i in 0..geom.len() {
            if geom.kind(i) != NodeKind::Interior {
                if !u.valid()[i] {
                    return Err(Error::Grid(format!(
                        "boundary value missing at node {:?}",
                        &geom.coords(i)[..geom.dim()]
                    )));
                }
                values[i] = u.values()[i];
            }
        }
        Self::checked(geom.clone(), values)
    }

    /// All-zero clamped data.
    pub fn zero(geom: &GridGeometry) -> Self {
        ClampedBoundaryData { geom: geom.clone(), values: vec![0.0; geom.len()] }
    }

    fn checked(geom: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Grid(format!(
                "non-finite boundary value at node {:?}",
                &geom.coords(i)[..geom.dim()]
            )));
        }
        Ok(ClampedBoundaryData { geom, values })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    /// Ring value at a non-interior node.
    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// Overwrites the rings of `u` with the prescribed data.
    pub fn apply(&self, u: &mut ScalarGrid) -> Result<()> {
        if u.geometry() != &self.geom {
            return Err(Error::RegionMismatch("boundary data and grid differ in geometry".into()));
        }
        let geom = self.geom.clone();
        let mut values = u.values().to_vec();
        let mut valid = u.valid().to_vec();
        for i in 0..geom.len() {
            if geom.kind(i) != NodeKind::Interior {
                values[i] = self.values[i];
                valid[i] = true;
            }
        }
        *u = ScalarGrid::from_parts(geom, values, valid)?;
        Ok(())
    }

    /// Grid with the prescribed rings and zero interior.
    pub fn zero_extension(&self) -> ScalarGrid {
        ScalarGrid::from_values(self.geom.clone(), self.values.clone()).expect("matching length")
    }

    /// Largest ring mismatch of `u` against the data.
    pub fn max_violation(&self, u: &ScalarGrid) -> f64 {
        (0..self.geom.len())
            .filter(|&i| self.geom.kind(i) != NodeKind::Interior)
            .map(|i| if u.valid()[i] { (u.values()[i] - self.values[i]).abs() } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

/// Field of fourth-order tensors with a data mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    geom: GridGeometry,
    data: Vec<Tensor4>,
    region: Vec<bool>,
}

impl TensorField {
    pub fn new(geom: GridGeometry, data: Vec<Tensor4>, region: Vec<bool>) -> Result<Self> {
        if data.len() != geom.len() || region.len() != geom.len() {
            return Err(Error::Grid("tensor field length mismatch".into()));
        }
        Ok(TensorField { geom, data, region })
    }

    pub fn constant(geom: &GridGeometry, t: Tensor4) -> Self {
        let n = geom.len();
        TensorField { geom: geom.clone(), data: vec![t; n], region: vec![true; n] }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }
    pub fn data(&self) -> &[Tensor4] {
        &self.data
    }
    pub fn region(&self) -> &[bool] {
        &self.region
    }
}

/// Per-step record of a [`minimize_clamped`] run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Sup-norm of the energy gradient at exit.
    pub grad_norm: f64,
    pub energy: f64,
    /// Accepted step lengths.
    pub steps: Vec<f64>,
    /// Energy after each accepted step, starting with the initial value.
    pub energy_trace: Vec<f64>,
    pub grad_trace: Vec<f64>,
    pub cg_iterations: Vec<usize>,
    pub cg_tolerance: f64,
    pub grad_tol: f64,
    pub converged: bool,
    pub max_iter_reached: bool,
}

/// Knobs of [`minimize_clamped_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    /// `None` selects `1e-10 · (1 + |E|)`.
    pub grad_tol: Option<f64>,
    pub max_iter: usize,
    pub cg_tol: f64,
    pub cg_max_iter: Option<usize>,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { grad_tol: None, max_iter: 50, cg_tol: 1e-12, cg_max_iter: None, armijo: 1e-4, max_backtracks: 60 }
    }
}

/// Default gradient tolerance for a given energy value.
pub fn default_grad_tol(energy: f64) -> f64 {
    1e-10 * (1.0 + energy.abs())
}

fn in_q(geom: &GridGeometry, idx: usize) -> bool {
    geom.edge_distance(idx) >= 1
}

/// Second differences at `idx` from a value lookup.
#[inline]
fn hessian_lookup(geom: &GridGeometry, idx: usize, v: impl Fn(usize) -> f64) -> SymMat {
    let n = geom.dim();
    let inv_h2 = 1.0 / (geom.h() * geom.h());
    let mut m = SymMat::zeros(n);
    let e = m.packed_mut();
    for i in 0..n {
        let si = geom.stride(i);
        e[packed_index(n, i, i)] = (v(idx + si) - 2.0 * v(idx) + v(idx - si)) * inv_h2;
        for j in (i + 1)..n {
            let sj = geom.stride(j);
            e[packed_index(n, i, j)] =
                (v(idx + si + sj) - v(idx + si - sj) - v(idx - si + sj) + v(idx - si - sj)) * (0.25 * inv_h2);
        }
    }
    m
}

fn check_ring_valid(u: &ScalarGrid) -> Result<()> {
    if let Some(i) = u.valid().iter().position(|v| !v) {
        let g = u.geometry();
        return Err(Error::Grid(format!("potential has no value at node {:?}", &g.coords(i)[..g.dim()])));
    }
    Ok(())
}

fn node_error(geom: &GridGeometry, idx: usize, norm: f64, bound: f64) -> Error {
    Error::Inadmissible { node: Some(geom.coords(idx)[..geom.dim()].to_vec()), norm, bound }
}

/// Hessians on `Q`, zero elsewhere, with the first node (lowest index)
/// exceeding `bound` reported.
fn q_hessians(u: &ScalarGrid, bound: f64) -> Result<Vec<SymMat>> {
    check_ring_valid(u)?;
    let geom = u.geometry();
    let vals = u.values();
    let n = geom.dim();
    let hs: Vec<SymMat> = par::map_range(geom.len(), |i| {
        if in_q(geom, i) {
            hessian_lookup(geom, i, |j| vals[j])
        } else {
            SymMat::zeros(n)
        }
    });
    if bound.is_finite() {
        let norms = par::map_range(geom.len(), |i| if in_q(geom, i) { hs[i].op_norm() } else { 0.0 });
        if let Some(i) = norms.iter().position(|&x| !(x <= bound)) {
            return Err(node_error(geom, i, norms[i], bound));
        }
    } else if let Some(i) = hs.iter().position(|m| !m.is_finite()) {
        return Err(node_error(geom, i, f64::NAN, bound));
    }
    Ok(hs)
}

fn energy_from_hessians(geom: &GridGeometry, hs: &[SymMat], model: &EnergyModel) -> f64 {
    geom.cell_volume()
        * par::sum_range(geom.len(), |i| if in_q(geom, i) { model.value_unchecked(&hs[i]) } else { 0.0 })
}

/// `hⁿ Σ_Q F(D²_h u)`.
pub fn assemble_energy(u: &ScalarGrid, model: &EnergyModel) -> Result<f64> {
    check_dims(u.geometry(), model.dim())?;
    let hs = q_hessians(u, model.radius())?;
    Ok(energy_from_hessians(u.geometry(), &hs, model))
}

fn check_dims(geom: &GridGeometry, dim: usize) -> Result<()> {
    if geom.dim() != dim {
        return Err(Error::InvalidArgument(format!("model dimension {dim} on a {}-dimensional grid", geom.dim())));
    }
    Ok(())
}

/// `hⁿ Σ D_ij A_ij` at an interior node; `a` vanishes off `Q`.
#[inline]
fn dd_at(geom: &GridGeometry, a: &[SymMat], idx: usize) -> f64 {
    crate::grid::double_divergence_at(geom, a, idx)
}

fn gradient_from_flux(geom: &GridGeometry, interior: &[usize], a: &[SymMat]) -> Vec<f64> {
    let w = geom.cell_volume();
    par::map_slice(interior, |&j| w * dd_at(geom, a, j))
}

fn flux_field(geom: &GridGeometry, hs: &[SymMat], model: &EnergyModel) -> Vec<SymMat> {
    let n = geom.dim();
    par::map_range(geom.len(), |i| if in_q(geom, i) { model.gradient_unchecked(&hs[i]) } else { SymMat::zeros(n) })
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Exact gradient of the discrete energy with respect to interior values.
/// The result is valid on interior nodes only.
pub fn energy_gradient(u: &ScalarGrid, model: &EnergyModel) -> Result<ScalarGrid> {
    check_dims(u.geometry(), model.dim())?;
    let geom = u.geometry();
    let hs = q_hessians(u, model.radius())?;
    let a = flux_field(geom, &hs, model);
    let interior = geom.interior_indices();
    let g = gradient_from_flux(geom, &interior, &a);
    let mut values = vec![0.0; geom.len()];
    let mut valid = vec![false; geom.len()];
    for (k, &j) in interior.iter().enumerate() {
        values[j] = g[k];
        valid[j] = true;
    }
    ScalarGrid::from_parts(geom.clone(), values, valid)
}

/// Sparse view of a test function with sorted lookup.
struct SparseTest<'a> {
    sorted: Vec<(usize, f64)>,
    _src: &'a TestFunction,
}

impl<'a> SparseTest<'a> {
    fn new(t: &'a TestFunction) -> Self {
        let mut sorted = t.support.clone();
        sorted.sort_unstable_by_key(|p| p.0);
        SparseTest { sorted, _src: t }
    }
    fn get(&self, idx: usize) -> f64 {
        match self.sorted.binary_search_by_key(&idx, |p| p.0) {
            Ok(k) => self.sorted[k].1,
            Err(_) => 0.0,
        }
    }
}

/// `hⁿ Σ_x <A(x), D²η(x)>` for each test, with `A` supplied on demand.
fn pair_with_tests(
    geom: &GridGeometry,
    tests: &TestFunctionSet,
    flux: impl Fn(usize) -> Result<SymMat> + Sync + Send,
) -> Result<Vec<f64>> {
    let w = geom.cell_volume();
    let res: Vec<Result<f64>> = par::map_slice(&tests.tests, |t| {
        let sp = SparseTest::new(t);
        let mut s = 0.0;
        for i in t.hessian_support(geom) {
            if !in_q(geom, i) {
                return Err(Error::RegionMismatch("test function Hessian reaches the grid edge".into()));
            }
            let d2eta = hessian_lookup(geom, i, |j| sp.get(j));
            s += flux(i)?.dot(&d2eta);
        }
        Ok(w * s)
    });
    res.into_iter().collect()
}

fn admissible_hessian(u: &ScalarGrid, i: usize, bound: f64) -> Result<SymMat> {
    let geom = u.geometry();
    let m = hessian_lookup(geom, i, |j| u.values()[j]);
    let n = geom.dim();
    // The stencil touches only the 3ⁿ neighborhood; every node must carry data.
    let mut ok = true;
    for_each_neighbor(geom, i, |j| ok &= u.valid()[j]);
    if !ok {
        return Err(Error::RegionMismatch(format!(
            "potential lacks data around node {:?}",
            &geom.coords(i)[..n]
        )));
    }
    if !m.is_finite() {
        return Err(node_error(geom, i, f64::NAN, bound));
    }
    if bound.is_finite() {
        let norm = m.op_norm();
        if norm > bound {
            return Err(node_error(geom, i, norm, bound));
        }
    }
    Ok(m)
}

fn for_each_neighbor(geom: &GridGeometry, i: usize, mut f: impl FnMut(usize)) {
    let n = geom.dim();
    let mut off = [-1isize; MAX_DIM];
    loop {
        if let Some(j) = geom.offset(i, &off[..n]) {
            f(j);
        }
        let mut a = 0;
        loop {
            if a == n {
                return;
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

/// `∫ <F^{ij}(D²u), D²η>` for each test function.
pub fn weak_residual(u: &ScalarGrid, model: &EnergyModel, tests: &TestFunctionSet) -> Result<Vec<f64>> {
    check_dims(u.geometry(), model.dim())?;
    pair_with_tests(u.geometry(), tests, |i| {
        let m = admissible_hessian(u, i, model.radius())?;
        Ok(model.gradient_unchecked(&m))
    })
}

/// `∫ a^{ij,kl}(D²u) u_ij η_kl` for each test function.
pub fn dd_weak_residual(u: &ScalarGrid, model: &DoubleDivergenceModel, tests: &TestFunctionSet) -> Result<Vec<f64>> {
    check_dims(u.geometry(), model.dim())?;
    pair_with_tests(u.geometry(), tests, |i| {
        let m = admissible_hessian(u, i, model.radius())?;
        Ok(model.flux(&m))
    })
}

/// `∫ b^{ij,kl} f_ij η_kl` for each test function.
pub fn linearized_residual(f: &ScalarGrid, b: &TensorField, tests: &TestFunctionSet) -> Result<Vec<f64>> {
    if f.geometry() != b.geometry() {
        return Err(Error::RegionMismatch("coefficient field and f differ in geometry".into()));
    }
    pair_with_tests(f.geometry(), tests, |i| {
        if !b.region[i] {
            return Err(Error::RegionMismatch(format!(
                "coefficients missing at node {:?}",
                &f.geometry().coords(i)[..f.dim()]
            )));
        }
        let m = admissible_hessian(f, i, f64::INFINITY)?;
        Ok(b.data[i].contract_first(&m))
    })
}

/// `b(x) = ∫₀¹ F''(D²u(x) + t(D²u(x + s e_m) − D²u(x))) dt` wherever both
/// Hessians exist.
pub fn linearized_coefficient_field(
    u: &ScalarGrid,
    model: &EnergyModel,
    direction: usize,
    step_nodes: usize,
) -> Result<TensorField> {
    let geom = u.geometry().clone();
    let hs = crate::grid::hessian_field(u);
    let mut off = [0isize; MAX_DIM];
    off[direction] = step_nodes as isize;
    let n = geom.dim();
    let items: Vec<Result<(Tensor4, bool)>> = par::map_range(geom.len(), |i| {
        let Some(j) = geom.offset(i, &off[..n]) else { return Ok((Tensor4::zeros(n), false)) };
        if !(hs.region()[i] && hs.region()[j]) {
            return Ok((Tensor4::zeros(n), false));
        }
        let t = linearized_coefficients(model, hs.at(i), hs.at(j), DEFAULT_QUAD_NODES)
            .map_err(|e| match e {
                Error::Inadmissible { norm, bound, .. } => node_error(&geom, i, norm, bound),
                other => other,
            })?;
        Ok((t, true))
    });
    let mut data = Vec::with_capacity(geom.len());
    let mut region = Vec::with_capacity(geom.len());
    for it in items {
        let (t, r) = it?;
        data.push(t);
        region.push(r);
    }
    TensorField::new(geom, data, region)
}

/// Stencil coefficient matrices `∂D²_h u(x)/∂u(x + o)` for offsets in `{-1,0,1}ⁿ`.
fn stencil_weights(geom: &GridGeometry) -> Vec<([isize; MAX_DIM], SymMat)> {
    let n = geom.dim();
    let inv_h2 = 1.0 / (geom.h() * geom.h());
    let mut out = Vec::new();
    let mut off = [-1isize; MAX_DIM];
    for a in n..MAX_DIM {
        off[a] = 0;
    }
    loop {
        let nz: Vec<usize> = (0..n).filter(|&a| off[a] != 0).collect();
        let mut c = SymMat::zeros(n);
        match nz.len() {
            0 => (0..n).for_each(|a| c.set(a, a, -2.0 * inv_h2)),
            1 => c.set(nz[0], nz[0], inv_h2),
            2 => c.set(nz[0], nz[1], (off[nz[0]] * off[nz[1]]) as f64 * 0.25 * inv_h2),
            _ => {}
        }
        if nz.len() <= 2 {
            // Weight of u(x + o) in D²u(x) is C(o); u(x) enters D²u(x − o).
            out.push((off, c));
        }
        let mut a = 0;
        loop {
            if a == n {
                return out;
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

/// Matrix-free Hessian of the discrete energy on the interior unknowns.
struct NewtonOperator<'a> {
    geom: &'a GridGeometry,
    interior: &'a [usize],
    tensors: Vec<Tensor4>,
}

impl NewtonOperator<'_> {
    fn apply(&self, x: &[f64], full: &mut [f64], flux: &mut [SymMat], out: &mut [f64]) {
        let geom = self.geom;
        for (k, &j) in self.interior.iter().enumerate() {
            full[j] = x[k];
        }
        let full_ref: &[f64] = full;
        let n = geom.dim();
        par::fill(flux, |i| {
            if in_q(geom, i) {
                self.tensors[i].contract_first(&hessian_lookup(geom, i, |j| full_ref[j]))
            } else {
                SymMat::zeros(n)
            }
        });
        let w = geom.cell_volume();
        let flux_ref: &[SymMat] = flux;
        par::fill(out, |k| w * dd_at(geom, flux_ref, self.interior[k]));
    }

    fn diagonal(&self) -> Vec<f64> {
        let geom = self.geom;
        let n = geom.dim();
        let weights = stencil_weights(geom);
        let w = geom.cell_volume();
        par::map_slice(self.interior, |&j| {
            let mut d = 0.0;
            for (off, c) in &weights {
                let neg: Vec<isize> = off[..n].iter().map(|o| -o).collect();
                if let Some(i) = geom.offset(j, &neg) {
                    d += self.tensors[i].bilinear(c, c);
                }
            }
            w * d
        })
    }
}

/// Outcome of a preconditioned CG solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned CG for `A x = b` from `x = 0`. Stops when
/// `‖r‖₂ ≤ rel_tol ‖b‖₂` or `‖r‖_∞ ≤ abs_tol`.
fn pcg(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgOutcome)> {
    let m = b.len();
    let mut x = vec![0.0; m];
    let bnorm = par::dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok((x, CgOutcome { iterations: 0, relative_residual: 0.0 }));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; m];
    let mut rz = par::dot(&r, &z);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = par::dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotElliptic(pap));
        }
        let alpha = rz / pap;
        for k in 0..m {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rnorm = par::dot(&r, &r).sqrt();
        let rel = rnorm / bnorm;
        if rel <= rel_tol || sup(&r) <= abs_tol {
            return Ok((x, CgOutcome { iterations: it, relative_residual: rel }));
        }
        if rel < 0.5 * best {
            best = rel;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 50 * (1 + m / 100).min(100) {
                return Err(Error::CgStagnation { iterations: it, residual: rel });
            }
        }
        for k in 0..m {
            z[k] = r[k] / diag[k];
        }
        let rz_new = par::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
    }
    let rel = par::dot(&r, &r).sqrt() / bnorm;
    Err(Error::CgStagnation { iterations: max_iter, residual: rel })
}

fn default_cg_max_iter(unknowns: usize) -> usize {
    (20 * unknowns).max(1000)
}

/// Solves `H d = rhs` for the Newton operator with tensors `t`.
fn newton_solve(
    geom: &GridGeometry,
    interior: &[usize],
    tensors: Vec<Tensor4>,
    rhs: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgOutcome)> {
    let op = NewtonOperator { geom, interior, tensors };
    let diag = op.diagonal();
    if let Some(d) = diag.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::NotElliptic(*d));
    }
    let mut full = vec![0.0; geom.len()];
    let mut flux = vec![SymMat::zeros(geom.dim()); geom.len()];
    let mut apply = |x: &[f64], out: &mut [f64]| op.apply(x, &mut full, &mut flux, out);
    pcg(&mut apply, &diag, rhs, rel_tol, abs_tol, max_iter)
}

/// [`minimize_clamped_with`] with default options apart from the tolerance
/// and iteration cap.
pub fn minimize_clamped(
    model: &EnergyModel,
    bc: &ClampedBoundaryData,
    init: &ScalarGrid,
    grad_tol: Option<f64>,
    max_iter: usize,
) -> Result<(ScalarGrid, SolveReport)> {
    let opts = SolveOptions { grad_tol, max_iter, ..SolveOptions::default() };
    minimize_clamped_with(model, bc, init, &opts)
}

/// Damped Newton with Armijo backtracking on the discrete energy.
///
/// The rings of `init` are replaced by `bc`. Iterates keep every node Hessian
/// within `ρ_U − 1e-6`. Hitting `max_iter` is reported in the returned
/// [`SolveReport`], not as an error.
pub fn minimize_clamped_with(
    model: &EnergyModel,
    bc: &ClampedBoundaryData,
    init: &ScalarGrid,
    opts: &SolveOptions,
) -> Result<(ScalarGrid, SolveReport)> {
    let geom = bc.geometry().clone();
    check_dims(&geom, model.dim())?;
    let mut u = init.clone();
    bc.apply(&mut u)?;
    check_ring_valid(&u)?;
    let interior = geom.interior_indices();
    let radius = model.radius();
    let inner = if radius.is_finite() { (radius - ADMISSIBILITY_MARGIN).max(0.0) } else { radius };

    let mut hs = q_hessians(&u, radius)?;
    let mut energy = energy_from_hessians(&geom, &hs, model);
    let mut grad = gradient_from_flux(&geom, &interior, &flux_field(&geom, &hs, model));
    let mut gnorm = sup(&grad);
    let cg_max = opts.cg_max_iter.unwrap_or_else(|| default_cg_max_iter(interior.len()));

    let mut report = SolveReport {
        iterations: 0,
        grad_norm: gnorm,
        energy,
        steps: Vec::new(),
        energy_trace: vec![energy],
        grad_trace: vec![gnorm],
        cg_iterations: Vec::new(),
        cg_tolerance: opts.cg_tol,
        grad_tol: opts.grad_tol.unwrap_or_else(|| default_grad_tol(energy)),
        converged: false,
        max_iter_reached: false,
    };

    loop {
        let tol = opts.grad_tol.unwrap_or_else(|| default_grad_tol(energy));
        report.grad_tol = tol;
        if gnorm <= tol {
            report.converged = true;
            break;
        }
        if report.iterations >= opts.max_iter {
            report.max_iter_reached = true;
            log::warn!("Newton stopped after {} iterations, gradient {gnorm:e}", report.iterations);
            break;
        }
        let it = report.iterations;
        let tensors: Vec<Tensor4> = par::map_range(geom.len(), |i| {
            if in_q(&geom, i) {
                model.hessian_unchecked(&hs[i])
            } else {
                Tensor4::zeros(geom.dim())
            }
        });
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let (dir, cg) = newton_solve(&geom, &interior, tensors, &rhs, opts.cg_tol, 0.1 * tol, cg_max)?;
        report.cg_iterations.push(cg.iterations);
        let mut slope = par::dot(&grad, &dir);
        let mut dir = dir;
        if !(slope < 0.0) {
            dir = rhs.clone();
            slope = -par::dot(&grad, &grad);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        let mut admissible_failures = 0;
        for _ in 0..opts.max_backtracks {
            let mut trial = u.clone();
            {
                let v = trial.values_mut();
                for (k, &j) in interior.iter().enumerate() {
                    v[j] += alpha * dir[k];
                }
            }
            let ths = match q_hessians(&trial, inner) {
                Ok(h) => h,
                Err(Error::Inadmissible { .. }) => {
                    admissible_failures += 1;
                    alpha *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let e_trial = energy_from_hessians(&geom, &ths, model);
            let armijo = e_trial <= energy + opts.armijo * alpha * slope;
            let flat = e_trial - energy <= 1e-13 * (1.0 + energy.abs());
            if armijo || flat {
                let g_trial = gradient_from_flux(&geom, &interior, &flux_field(&geom, &ths, model));
                let gn = sup(&g_trial);
                if armijo || gn < gnorm {
                    accepted = Some((trial, ths, e_trial, g_trial, gn));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, ths, e_trial, g_trial, gn)) = accepted else {
            if admissible_failures == opts.max_backtracks {
                return Err(Error::Inadmissible { node: None, norm: f64::NAN, bound: inner });
            }
            return Err(Error::LineSearch(it));
        };
        u = trial;
        hs = ths;
        energy = e_trial;
        grad = g_trial;
        gnorm = gn;
        report.iterations += 1;
        report.steps.push(alpha);
        report.energy_trace.push(energy);
        report.grad_trace.push(gnorm);
        log::debug!("Newton {}: E = {energy:e}, |g| = {gnorm:e}, step {alpha}", report.iterations);
    }
    report.grad_norm = gnorm;
    report.energy = energy;
    Ok((u, report))
}

/// Minimizer of `½ ∫ <c0 D²w, D²w>` with clamped data, by CG to `1e-12`
/// relative residual.
pub fn solve_constant_coeff_bvp(c0: &Tensor4, bc: &ClampedBoundaryData, geom: &GridGeometry) -> Result<ScalarGrid> {
    solve_constant_coeff_bvp_detailed(c0, bc, geom).map(|(w, _)| w)
}

/// As [`solve_constant_coeff_bvp`], also returning the CG summary.
pub fn solve_constant_coeff_bvp_detailed(
    c0: &Tensor4,
    bc: &ClampedBoundaryData,
    geom: &GridGeometry,
) -> Result<(ScalarGrid, CgOutcome)> {
    if bc.geometry() != geom {
        return Err(Error::RegionMismatch("boundary data and grid differ in geometry".into()));
    }
    check_dims(geom, c0.dim())?;
    let lambda = c0.legendre_min_eigenvalue()?;
    if !(lambda > 0.0) {
        return Err(Error::NotElliptic(lambda));
    }
    let interior = geom.interior_indices();
    let mut w = bc.zero_extension();
    let n = geom.dim();
    let tensors: Vec<Tensor4> = (0..geom.len()).map(|i| if in_q(geom, i) { *c0 } else { Tensor4::zeros(n) }).collect();
    let vals = w.values();
    let flux: Vec<SymMat> = par::map_range(geom.len(), |i| {
        if in_q(geom, i) {
            c0.contract_first(&hessian_lookup(geom, i, |j| vals[j]))
        } else {
            SymMat::zeros(n)
        }
    });
    let rhs: Vec<f64> = gradient_from_flux(geom, &interior, &flux).iter().map(|g| -g).collect();
    let (x, cg) = newton_solve(geom, &interior, tensors, &rhs, BVP_CG_TOL, 0.0, default_cg_max_iter(interior.len()))?;
    let v = w.values_mut();
    for (k, &j) in interior.iter().enumerate() {
        v[j] = x[k];
    }
    Ok((w, cg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(n: usize, nodes: usize, hw: f64) -> GridGeometry {
        make_grid(n, nodes, hw).unwrap().geometry().clone()
    }

    /// Directly coded 13-point operator `Δ₁₁² + Δ₂₂² + 2Δ₁₂²` (times h⁴).
    fn thirteen_point(g: &GridGeometry, v: &[f64], idx: usize) -> f64 {
        let c = g.coords(idx);
        let at = |a: isize, b: isize| v[g.index(&[(c[0] as isize + a) as usize, (c[1] as isize + b) as usize])];
        let mut s = 12.5 * at(0, 0);
        for (a, b) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            s += -4.0 * at(a, b);
        }
        for (a, b) in [(2, 0), (-2, 0), (0, 2), (0, -2)] {
            s += 0.75 * at(a, b);
        }
        for (a, b) in [(2, 2), (2, -2), (-2, 2), (-2, -2)] {
            s += 0.125 * at(a, b);
        }
        s / g.h().powi(4)
    }

    #[test]
    fn energy_examples() {
        let g = geom(2, 33, 1.0);
        let h = g.h();
        let q = EnergyModel::quadratic(2);
        assert_eq!(assemble_energy(&ScalarGrid::zeros(g.clone()), &q).unwrap(), 0.0);
        // Cells of Q cover [-1 + h/2, 1 - h/2]².
        let side = 2.0 - h;
        let a = EnergyModel::area(2, 0.9);
        assert_relative_eq!(assemble_energy(&ScalarGrid::zeros(g.clone()), &a).unwrap(), side * side, epsilon = 1e-12);
        assert!((side * side - 4.0).abs() <= 5.0 * h);
        let u = ScalarGrid::sample(g.clone(), |x| 0.5 * x[0] * x[0]);
        assert_relative_eq!(assemble_energy(&u, &q).unwrap(), 0.5 * side * side, epsilon = 1e-12);
        let steep = ScalarGrid::sample(g.clone(), |x| x[0] * x[0]);
        match assemble_energy(&steep, &a) {
            Err(Error::Inadmissible { node: Some(c), .. }) => assert_eq!(c, vec![1, 1]),
            other => panic!("expected admissibility error, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_gradient_is_thirteen_point_stencil() {
        let g = geom(2, 21, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = ScalarGrid::from_values(g.clone(), vals.clone()).unwrap();
        let grad = energy_gradient(&u, &EnergyModel::quadratic(2)).unwrap();
        let w = g.cell_volume();
        for j in g.interior_indices() {
            let want = w * thirteen_point(&g, &vals, j);
            assert_relative_eq!(grad.values()[j], want, max_relative = 1e-12, epsilon = 1e-9);
        }
        let z = energy_gradient(&ScalarGrid::zeros(g.clone()), &EnergyModel::area(2, 0.5)).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_energy_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, nodes) in [(2usize, 15usize), (3, 11)] {
            let g = geom(n, nodes, 1.0);
            let amp = 0.02;
            let u = ScalarGrid::sample(g.clone(), |x| amp * (x[0] * x[0] * x[1] + (x[1] + 0.3 * x[0]).sin()));
            let models = [
                EnergyModel::quadratic(n),
                EnergyModel::area(n, 0.9),
                EnergyModel::custom(n, "quartic", f64::INFINITY, std::sync::Arc::new(|m: &SymMat| {
                    0.5 * m.dot(m) + 0.25 * m.dot(m).powi(2)
                })),
            ];
            for model in &models {
                let grad = energy_gradient(&u, model).unwrap();
                for _ in 0..10 {
                    let interior = g.interior_indices();
                    let mut delta = vec![0.0; g.len()];
                    for &j in &interior {
                        delta[j] = rng.random_range(-1.0..1.0);
                    }
                    // Node-wise energy differences keep the large constant part of F out.
                    let shifted = |e: f64| {
                        let v: Vec<f64> = u.values().iter().zip(&delta).map(|(a, d)| a + e * d).collect();
                        crate::grid::hessian_field(&ScalarGrid::from_values(g.clone(), v).unwrap())
                    };
                    let c = |e: f64| {
                        let (p, m) = (shifted(e), shifted(-e));
                        let s: f64 = (0..g.len())
                            .filter(|&i| in_q(&g, i))
                            .map(|i| model.value_unchecked(p.at(i)) - model.value_unchecked(m.at(i)))
                            .sum();
                        s * g.cell_volume() / (2.0 * e)
                    };
                    let fd = (4.0 * c(1e-5) - c(2e-5)) / 3.0;
                    let an: f64 = interior.iter().map(|&j| grad.values()[j] * delta[j]).sum();
                    assert!((an - fd).abs() <= 1e-6 * fd.abs().max(1e-6), "{} n={n}: {an} vs {fd}", model.name());
                }
            }
        }
    }

    /// Dense banded Cholesky on the 13-point system, an independent direct solve.
    fn direct_biharmonic(g: &GridGeometry, bc: &ClampedBoundaryData) -> Vec<f64> {
        let interior = g.interior_indices();
        let m = interior.len();
        let mut pos = vec![usize::MAX; g.len()];
        for (k, &j) in interior.iter().enumerate() {
            pos[j] = k;
        }
        let bw = 2 * g.stride(0) + 2;
        // Lower band storage: a[k][d] = A[k][k - d].
        let mut a = vec![vec![0.0; bw + 1]; m];
        let mut rhs = vec![0.0; m];
        let stencil: Vec<((isize, isize), f64)> = {
            let mut s = vec![((0, 0), 12.5)];
            for (o, c) in [((1, 0), -4.0), ((-1, 0), -4.0), ((0, 1), -4.0), ((0, -1), -4.0)] {
                s.push((o, c));
            }
            for (o, c) in [((2, 0), 0.75), ((-2, 0), 0.75), ((0, 2), 0.75), ((0, -2), 0.75)] {
                s.push((o, c));
            }
            for o in [(2, 2), (2, -2), (-2, 2), (-2, -2)] {
                s.push((o, 0.125));
            }
            s
        };
        for (k, &j) in interior.iter().enumerate() {
            let c = g.coords(j);
            for ((a0, a1), w) in &stencil {
                let nb = g.index(&[(c[0] as isize + a0) as usize, (c[1] as isize + a1) as usize]);
                if pos[nb] != usize::MAX {
                    let l = pos[nb];
                    if l <= k {
                        a[k][k - l] += w;
                    }
                } else {
                    rhs[k] -= w * bc.value(nb);
                }
            }
        }
        // Cholesky in band form.
        for k in 0..m {
            for d in (1..=bw.min(k)).rev() {
                let j = k - d;
                let mut s = a[k][d];
                for e in (d + 1)..=bw.min(k) {
                    let i = k - e;
                    if j >= i && j - i <= bw {
                        s -= a[k][e] * a[j][j - i];
                    }
                }
                a[k][d] = s / a[j][0];
            }
            let mut s = a[k][0];
            for d in 1..=bw.min(k) {
                s -= a[k][d] * a[k][d];
            }
            a[k][0] = s.sqrt();
        }
        let mut y = vec![0.0; m];
        for k in 0..m {
            let mut s = rhs[k];
            for d in 1..=bw.min(k) {
                s -= a[k][d] * y[k - d];
            }
            y[k] = s / a[k][0];
        }
        for k in (0..m).rev() {
            let mut s = y[k];
            for d in 1..=bw {
                if k + d < m {
                    s -= a[k + d][d] * y[k + d];
                }
            }
            y[k] = s / a[k][0];
        }
        let mut full = vec![0.0; g.len()];
        for (k, &j) in interior.iter().enumerate() {
            full[j] = y[k];
        }
        full
    }

    #[test]
    fn biharmonic_cubic_recovered_and_matches_direct_solve() {
        for nodes in [17, 33] {
            let g = geom(2, nodes, 1.0);
            let exact = |x: &[f64]| x[0].powi(3) * x[1];
            let bc = ClampedBoundaryData::from_fn(&g, exact).unwrap();
            let q = EnergyModel::quadratic(2);
            let (u, rep) = minimize_clamped(&q, &bc, &ScalarGrid::zeros(g.clone()), None, 20).unwrap();
            assert!(rep.converged && rep.grad_norm <= rep.grad_tol);
            assert!(rep.iterations <= 2, "{rep:?}");
            let ustar = ScalarGrid::sample(g.clone(), exact);
            assert!(u.max_abs_diff(&ustar) < 1e-9, "{}", u.max_abs_diff(&ustar));
            let direct = direct_biharmonic(&g, &bc);
            for j in g.interior_indices() {
                assert!((u.values()[j] - direct[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn trivial_minimizers() {
        let g = geom(2, 17, 1.0);
        let q = EnergyModel::quadratic(2);
        let zero = ClampedBoundaryData::zero(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let init = ScalarGrid::from_values(g.clone(), vals).unwrap();
        let (u, rep) = minimize_clamped(&q, &zero, &init, None, 20).unwrap();
        assert!(rep.converged);
        assert!(u.values().iter().all(|v| v.abs() < 1e-10));

        // Quadratic data started at the exact solution: zero iterations.
        let poly = |x: &[f64]| 0.2 * x[0] * x[0] - 0.1 * x[0] * x[1] + 0.05 * x[1] * x[1] + x[0];
        for model in [q.clone(), EnergyModel::area(2, 0.9)] {
            let bc = ClampedBoundaryData::from_fn(&g, poly).unwrap();
            let init = ScalarGrid::sample(g.clone(), poly);
            let (_, rep) = minimize_clamped(&model, &bc, &init, None, 20).unwrap();
            assert_eq!(rep.iterations, 0, "{rep:?}");
        }
    }

    #[test]
    fn area_minimizer_monotone_and_unique() {
        let g = geom(2, 17, 1.0);
        let a = EnergyModel::area(2, 0.9);
        let data = |x: &[f64]| 0.05 * (x[0].powi(3) * x[1] + x[0] * x[0] - 0.5 * x[1] * x[1] * x[0]);
        let bc = ClampedBoundaryData::from_fn(&g, data).unwrap();
        let init1 = ScalarGrid::sample(g.clone(), data);
        let (u1, r1) = minimize_clamped(&a, &bc, &init1, None, 50).unwrap();
        assert!(r1.converged);
        for w in r1.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-13 * w[0].abs());
        }
        let init2 = ScalarGrid::sample(g.clone(), |x| data(x) + 0.01 * (3.0 * x[0]).sin() * (1.0 - x[1] * x[1]).powi(3));
        let (u2, r2) = minimize_clamped(&a, &bc, &init2, None, 50).unwrap();
        assert!(r2.converged);
        let tol = r1.grad_tol.max(r2.grad_tol);
        // Sup-norm distance scaled to the gradient units of hⁿ-weighted residuals.
        assert!(u1.max_abs_diff(&u2) <= 10.0 * tol / g.cell_volume() * g.h().powi(4) + 1e-10);
        let res = weak_residual(&u1, &a, &TestFunctionSet::nodal(&g, &g.interior_indices()).unwrap()).unwrap();
        assert!(res.iter().all(|r| r.abs() <= r1.grad_tol));
    }

    #[test]
    fn weak_residual_examples() {
        let g = geom(2, 33, 1.0);
        let q = EnergyModel::quadratic(2);
        let bumps =
            TestFunctionSet::smooth_bumps(&g, &[vec![0.0, 0.0], vec![0.3, -0.2], vec![-0.4, 0.5]], 0.4).unwrap();
        let zero = weak_residual(&ScalarGrid::zeros(g.clone()), &q, &bumps).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        // Nodal tests reproduce the gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = ScalarGrid::sample(g.clone(), |x| 0.1 * (x[0] * 2.0).sin() * x[1].cos());
        let nodes: Vec<usize> = g.interior_indices().into_iter().filter(|_| rng.random_bool(0.1)).collect();
        let nodal = TestFunctionSet::nodal(&g, &nodes).unwrap();
        for model in [q.clone(), EnergyModel::area(2, 0.9)] {
            let r = weak_residual(&u, &model, &nodal).unwrap();
            let grad = energy_gradient(&u, &model).unwrap();
            for (k, &j) in nodes.iter().enumerate() {
                assert_relative_eq!(r[k], grad.values()[j], max_relative = 1e-10, epsilon = 1e-14);
            }
        }

        // The cubic is an exact discrete solution, so bump residuals vanish.
        let cubic = ScalarGrid::sample(g.clone(), |x| x[0].powi(3) * x[1]);
        let r = weak_residual(&cubic, &q, &bumps).unwrap();
        for (v, t) in r.iter().zip(&bumps.tests) {
            assert!(v.abs() <= 1e-10 * t.l1());
        }
    }

    #[test]
    fn dd_residual_examples() {
        let g = geom(2, 33, 1.0);
        let bumps = TestFunctionSet::smooth_bumps(&g, &[vec![0.1, 0.0], vec![-0.3, 0.4]], 0.35).unwrap();
        let u = ScalarGrid::sample(g.clone(), |x| 0.2 * (x[0] + x[1] * x[1]).sin());
        let id = DoubleDivergenceModel::constant(Tensor4::identity(2));
        let a = dd_weak_residual(&u, &id, &bumps).unwrap();
        let b = weak_residual(&u, &EnergyModel::quadratic(2), &bumps).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, max_relative = 1e-13, epsilon = 1e-15);
        }
        let quad = ScalarGrid::sample(g.clone(), |x| 0.3 * x[0] * x[0] - 0.2 * x[0] * x[1]);
        let hs = DoubleDivergenceModel::hamiltonian_stationary(2, 0.9);
        for v in dd_weak_residual(&quad, &hs, &bumps).unwrap() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn linearized_residual_examples() {
        let g = geom(2, 25, 1.0);
        let bumps = TestFunctionSet::smooth_bumps(&g, &[vec![0.0, 0.1], vec![0.2, -0.3]], 0.3).unwrap();
        let id = TensorField::constant(&g, Tensor4::identity(2));
        let f = ScalarGrid::sample(g.clone(), |x| 1.0 + x[0] - 2.0 * x[0] * x[1] + x[1] * x[1]);
        for v in linearized_residual(&f, &id, &bumps).unwrap() {
            assert!(v.abs() < 1e-12);
        }

        // Naive summation oracle on random data.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = ScalarGrid::from_values(g.clone(), vals.clone()).unwrap();
        let data: Vec<Tensor4> = (0..g.len())
            .map(|_| {
                let r: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
                Tensor4::from_fn(2, |i, j, k, l| r[8 * i + 4 * j + 2 * k + l])
            })
            .collect();
        let b = TensorField::new(g.clone(), data.clone(), vec![true; g.len()]).unwrap();
        let got = linearized_residual(&f, &b, &bumps).unwrap();
        let h = g.h();
        let d2 = |v: &dyn Fn(isize, isize) -> f64, i: usize, j: usize| -> f64 {
            match (i, j) {
                (0, 0) => (v(1, 0) - 2.0 * v(0, 0) + v(-1, 0)) / (h * h),
                (1, 1) => (v(0, 1) - 2.0 * v(0, 0) + v(0, -1)) / (h * h),
                _ => (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)) / (4.0 * h * h),
            }
        };
        for (t, want_got) in bumps.tests.iter().zip(&got) {
            let eta = t.dense(&g);
            let mut s = 0.0;
            for x in 1..24 {
                for y in 1..24 {
                    let idx = g.index(&[x, y]);
                    let fv = |a: isize, b: isize| vals[g.index(&[(x as isize + a) as usize, (y as isize + b) as usize])];
                    let ev = |a: isize, b: isize| eta[g.index(&[(x as isize + a) as usize, (y as isize + b) as usize])];
                    for i in 0..2 {
                        for j in 0..2 {
                            for k in 0..2 {
                                for l in 0..2 {
                                    s += data[idx].get(i, j, k, l) * d2(&fv, i, j) * d2(&ev, k, l);
                                }
                            }
                        }
                    }
                }
            }
            assert_relative_eq!(s * h * h, want_got, max_relative = 1e-11, epsilon = 1e-12);
        }

        let other = geom(2, 27, 1.0);
        assert!(matches!(
            linearized_residual(&f, &TensorField::constant(&other, Tensor4::identity(2)), &bumps),
            Err(Error::RegionMismatch(_))
        ));
    }

    #[test]
    fn difference_quotient_of_minimizer_solves_linearized_equation() {
        let g = geom(2, 33, 1.0);
        let q = EnergyModel::quadratic(2);
        let data = |x: &[f64]| (x[0]).exp() * x[1].sin();
        let bc = ClampedBoundaryData::from_fn(&g, data).unwrap();
        let (u, rep) = minimize_clamped(&q, &bc, &ScalarGrid::zeros(g.clone()), None, 10).unwrap();
        let f = crate::grid::difference_quotient(&u, 0, g.h()).unwrap();
        let b = linearized_coefficient_field(&u, &q, 0, 1).unwrap();
        let bumps = TestFunctionSet::smooth_bumps(&g, &[vec![0.0, 0.0], vec![-0.3, 0.3]], 0.4).unwrap();
        let r = linearized_residual(&f, &b, &bumps).unwrap();
        for (v, t) in r.iter().zip(&bumps.tests) {
            assert!(v.abs() <= 2.0 * rep.grad_tol * t.l1() / g.h(), "{v}");
        }
    }

    #[test]
    fn constant_coefficient_bvp() {
        let g = geom(2, 33, 1.0);
        let exact = |x: &[f64]| x[0].powi(3) * x[1];
        let bc = ClampedBoundaryData::from_fn(&g, exact).unwrap();
        let w = solve_constant_coeff_bvp(&Tensor4::identity(2), &bc, &g).unwrap();
        assert!(w.max_abs_diff(&ScalarGrid::sample(g.clone(), exact)) < 1e-9);
        let w5 = solve_constant_coeff_bvp(&Tensor4::identity(2).scale(5.0), &bc, &g).unwrap();
        assert!(w.max_abs_diff(&w5) < 1e-10);
        let z = solve_constant_coeff_bvp(&Tensor4::identity(2), &ClampedBoundaryData::zero(&g), &g).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
        let bad = Tensor4::identity(2).scale(-1.0);
        assert!(matches!(solve_constant_coeff_bvp(&bad, &bc, &g), Err(Error::NotElliptic(_))));

        // Agreement with the Newton solver for the quadratic model.
        let data = |x: &[f64]| (x[0] - 0.3 * x[1]).exp();
        let bc = ClampedBoundaryData::from_fn(&g, data).unwrap();
        let w = solve_constant_coeff_bvp(&Tensor4::identity(2), &bc, &g).unwrap();
        let (u, _) = minimize_clamped(&EnergyModel::quadratic(2), &bc, &ScalarGrid::zeros(g.clone()), None, 5).unwrap();
        assert!(w.max_abs_diff(&u) < 1e-9);
    }

    #[test]
    fn summation_by_parts_with_constant_tensor() {
        let g = geom(2, 21, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor4::from_fn(2, |i, j, k, l| r[8 * i + 4 * j + 2 * k + l]);
        let vals: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = ScalarGrid::from_values(g.clone(), vals.clone()).unwrap();
        let eta_nodes: Vec<usize> = g.interior_indices().into_iter().filter(|_| rng.random_bool(0.3)).collect();
        let support: Vec<(usize, f64)> = eta_nodes.iter().map(|&i| (i, rng.random_range(-1.0..1.0))).collect();
        let set = TestFunctionSet { tests: vec![TestFunction { support: support.clone() }], description: String::new() };
        let lhs = linearized_residual(&u, &TensorField::constant(&g, t), &set).unwrap()[0];
        // Both differences moved onto η: Σ_x η(x) · DD(T D²u)(x).
        let flux: Vec<SymMat> = (0..g.len())
            .map(|i| if in_q(&g, i) { t.contract_first(&hessian_lookup(&g, i, |j| vals[j])) } else { SymMat::zeros(2) })
            .collect();
        let rhs: f64 = support.iter().map(|&(i, e)| e * dd_at(&g, &flux, i)).sum::<f64>() * g.cell_volume();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-12);
    }
}
