//! Lagrangian graphs `{(x, Du(x))}`: induced metric, volume integrand,
//! Lagrangian phase, the Laplace–Beltrami operator, the variational
//! Hamiltonian stationary residual and the convexity certificate of the
//! volume integrand.

use serde::Serialize;

use crate::energy::{area_value, sample_rng, EnergyModel};
use crate::error::{Error, Result};
use crate::grid::{hessian_at, GridGeometry, ScalarGrid, SymMatField, TestFunctionSet};
use crate::linalg::{random_sym_in_ball, SymMat, MAX_DIM};
use crate::par;
use crate::solver::dd_weak_residual;
use crate::energy::DoubleDivergenceModel;

/// `g = I + M²`, `g⁻¹` and `√det g` per node.
#[derive(Clone, Debug)]
pub struct MetricField {
    geom: GridGeometry,
    g: Vec<SymMat>,
    ginv: Vec<SymMat>,
    sqrt_det: Vec<f64>,
    region: Vec<bool>,
}

impl MetricField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }
    pub fn g(&self) -> &[SymMat] {
        &self.g
    }
    pub fn ginv(&self) -> &[SymMat] {
        &self.ginv
    }
    pub fn sqrt_det(&self) -> &[f64] {
        &self.sqrt_det
    }
    pub fn region(&self) -> &[bool] {
        &self.region
    }
    /// The metric as a matrix field, for export.
    pub fn g_field(&self) -> SymMatField {
        SymMatField::new(self.geom.clone(), self.g.clone(), self.region.clone()).expect("consistent lengths")
    }
}

/// Induced metric of the Lagrangian graph with Hessian field `field`.
pub fn induced_metric(field: &SymMatField) -> MetricField {
    let geom = field.geometry().clone();
    let n = geom.dim();
    let parts: Vec<(SymMat, SymMat, f64)> = par::map_slice(field.data(), |m| {
        let g = SymMat::identity(n) + m.square();
        let ginv = g.inverse().expect("I + M² is positive definite");
        let d = g.det().sqrt();
        (g, ginv, d)
    });
    let mut g = Vec::with_capacity(parts.len());
    let mut ginv = Vec::with_capacity(parts.len());
    let mut sqrt_det = Vec::with_capacity(parts.len());
    for (a, b, c) in parts {
        g.push(a);
        ginv.push(b);
        sqrt_det.push(c);
    }
    MetricField { geom, g, ginv, sqrt_det, region: field.region().to_vec() }
}

/// `√det(I + M²)`.
pub fn volume_integrand(m: &SymMat) -> f64 {
    area_value(m)
}

/// Phase `Θ = Σ arctan λᵢ` and the ascending Hessian eigenvalues per node.
#[derive(Clone, Debug)]
pub struct PhaseField {
    geom: GridGeometry,
    theta: Vec<f64>,
    eigenvalues: Vec<[f64; MAX_DIM]>,
    region: Vec<bool>,
}

impl PhaseField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    /// First `n` entries are meaningful.
    pub fn eigenvalues(&self) -> &[[f64; MAX_DIM]] {
        &self.eigenvalues
    }
    pub fn region(&self) -> &[bool] {
        &self.region
    }
    pub fn theta_grid(&self) -> ScalarGrid {
        ScalarGrid::from_parts(self.geom.clone(), self.theta.clone(), self.region.clone()).expect("consistent lengths")
    }
    /// Largest `|Θ|` over the region.
    pub fn sup_norm(&self) -> f64 {
        self.theta.iter().zip(&self.region).filter(|(_, r)| **r).map(|(t, _)| t.abs()).fold(0.0, f64::max)
    }
}

/// `Σ arctan λᵢ` over the eigenvalues of `m`.
pub fn phase_of(m: &SymMat) -> Result<f64> {
    Ok(m.eigenvalues()?.iter().map(|l| l.atan()).sum())
}

pub fn lagrangian_phase(field: &SymMatField) -> Result<PhaseField> {
    let geom = field.geometry().clone();
    let n = geom.dim();
    let res: Vec<Result<(f64, [f64; MAX_DIM])>> = par::map_range(geom.len(), |i| {
        if !field.region()[i] {
            return Ok((0.0, [0.0; MAX_DIM]));
        }
        let ev = field.at(i).eigenvalues()?;
        let mut e = [0.0; MAX_DIM];
        e[..n].copy_from_slice(&ev);
        Ok((ev.iter().map(|l| l.atan()).sum(), e))
    });
    let mut theta = Vec::with_capacity(res.len());
    let mut eigenvalues = Vec::with_capacity(res.len());
    for r in res {
        let (t, e) = r?;
        theta.push(t);
        eigenvalues.push(e);
    }
    Ok(PhaseField { geom, theta, eigenvalues, region: field.region().to_vec() })
}

/// `∫ √det g · g^{ij} δ^{kl} u_ik η_jl` for each test function.
pub fn hamstat_residual(u: &ScalarGrid, tests: &TestFunctionSet) -> Result<Vec<f64>> {
    let model = DoubleDivergenceModel::hamiltonian_stationary(u.dim(), f64::INFINITY);
    dd_weak_residual(u, &model, tests)
}

fn neighborhood_ok(geom: &GridGeometry, i: usize, ok: impl Fn(usize) -> bool) -> bool {
    let n = geom.dim();
    let mut off = [-1isize; MAX_DIM];
    loop {
        match geom.offset(i, &off[..n]) {
            Some(j) if ok(j) => {}
            _ => return false,
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

fn shifted(geom: &GridGeometry, i: usize, moves: &[(usize, isize)]) -> usize {
    let mut off = [0isize; MAX_DIM];
    for &(a, s) in moves {
        off[a] += s;
    }
    geom.offset(i, &off[..geom.dim()]).expect("neighborhood checked")
}

/// `Δ_g φ = (1/√g) ∂ᵢ(√g g^{ij} ∂ⱼ φ)` in flux form: face-averaged
/// `√g g^{ij}`, one-sided normal and averaged central tangential differences.
/// Defined where `φ` and the metric cover the full `3ⁿ` neighborhood.
pub fn laplace_beltrami(phi: &ScalarGrid, metric: &MetricField) -> Result<ScalarGrid> {
    let geom = phi.geometry();
    if geom != metric.geometry() {
        return Err(Error::RegionMismatch("scalar and metric live on different grids".into()));
    }
    let n = geom.dim();
    let h = geom.h();
    let v = phi.values();
    let coef: Vec<SymMat> = (0..geom.len()).map(|i| metric.ginv[i].scale(metric.sqrt_det[i])).collect();
    let valid = |j: usize| phi.valid()[j] && metric.region[j];
    let region: Vec<bool> = par::map_range(geom.len(), |i| neighborhood_ok(geom, i, valid));
    if !region.iter().any(|&r| r) {
        return Err(Error::EmptyRegion("no node has a full neighborhood for the Laplace–Beltrami stencil".into()));
    }
    // Flux through the face between `a` and `a + e_i`.
    let flux = |a: usize, i: usize| -> f64 {
        let b = shifted(geom, a, &[(i, 1)]);
        let c = (coef[a] + coef[b]).scale(0.5);
        let mut s = 0.0;
        for j in 0..n {
            let d = if j == i {
                (v[b] - v[a]) / h
            } else {
                let (ap, am) = (shifted(geom, a, &[(j, 1)]), shifted(geom, a, &[(j, -1)]));
                let (bp, bm) = (shifted(geom, b, &[(j, 1)]), shifted(geom, b, &[(j, -1)]));
                (v[ap] - v[am] + v[bp] - v[bm]) / (4.0 * h)
            };
            s += c.get(i, j) * d;
        }
        s
    };
    let values = par::map_range(geom.len(), |x| {
        if !region[x] {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            let prev = shifted(geom, x, &[(i, -1)]);
            s += flux(x, i) - flux(prev, i);
        }
        s / (h * metric.sqrt_det[x])
    });
    ScalarGrid::from_parts(geom.clone(), values, region)
}

/// Expanded form on the Lagrangian graph of `u`:
/// `g^{ij} φ_ij − g^{jp} u_pq Θ_q φ_j` with central differences throughout.
pub fn laplace_beltrami_expanded(phi: &ScalarGrid, u: &ScalarGrid) -> Result<ScalarGrid> {
    let geom = phi.geometry();
    if geom != u.geometry() {
        return Err(Error::RegionMismatch("scalar and potential live on different grids".into()));
    }
    let n = geom.dim();
    let h = geom.h();
    let hf = crate::grid::hessian_field(u);
    let phase = lagrangian_phase(&hf)?;
    let metric = induced_metric(&hf);
    let v = phi.values();
    let region: Vec<bool> = par::map_range(geom.len(), |i| {
        neighborhood_ok(geom, i, |j| phi.valid()[j] && hf.region()[j])
    });
    if !region.iter().any(|&r| r) {
        return Err(Error::EmptyRegion("no node has a full neighborhood for the expanded stencil".into()));
    }
    let th = phase.theta();
    let values = par::map_range(geom.len(), |x| {
        if !region[x] {
            return 0.0;
        }
        let d2 = hessian_at(geom, v, x);
        let ginv = &metric.ginv[x];
        let m = hf.at(x);
        let mut grad = [0.0; MAX_DIM];
        let mut dth = [0.0; MAX_DIM];
        for a in 0..n {
            let (p, q) = (shifted(geom, x, &[(a, 1)]), shifted(geom, x, &[(a, -1)]));
            grad[a] = (v[p] - v[q]) / (2.0 * h);
            dth[a] = (th[p] - th[q]) / (2.0 * h);
        }
        let mut s = ginv.dot(&d2);
        for j in 0..n {
            let mut b = 0.0;
            for p in 0..n {
                for q in 0..n {
                    b += ginv.get(j, p) * m.get(p, q) * dth[q];
                }
            }
            s -= b * grad[j];
        }
        s
    });
    ScalarGrid::from_parts(geom.clone(), values, region)
}

/// Norms of `Δ_g Θ` over the inner half-domain `max|xₐ| ≤ half_width / 2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseResidual {
    pub sup: f64,
    pub l2: f64,
    pub nodes: usize,
}

pub fn phase_harmonicity_residual(u: &ScalarGrid) -> Result<PhaseResidual> {
    let hf = crate::grid::hessian_field(u);
    let phase = lagrangian_phase(&hf)?;
    let metric = induced_metric(&hf);
    let lb = laplace_beltrami(&phase.theta_grid(), &metric)?;
    let geom = u.geometry();
    let n = geom.dim();
    let lim = 0.5 * geom.half_width() * (1.0 + 1e-12);
    let mut sup: f64 = 0.0;
    let mut sq = 0.0;
    let mut nodes = 0;
    for i in 0..geom.len() {
        let x = geom.position(i);
        if !lb.valid()[i] || (0..n).any(|a| x[a].abs() > lim) {
            continue;
        }
        let r = lb.values()[i];
        sup = sup.max(r.abs());
        sq += r * r;
        nodes += 1;
    }
    if nodes == 0 {
        return Err(Error::EmptyRegion("inner half-domain has no residual nodes".into()));
    }
    Ok(PhaseResidual { sup, l2: (sq * geom.cell_volume()).sqrt(), nodes })
}

/// Derivatives of `V(λ) = ∏ √(1 + λᵢ²)` in eigenvalue coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolumeDerivatives {
    pub v: f64,
    /// `∂ᵢV = eᵢ V`, `eᵢ = λᵢ/(1+λᵢ²)`.
    pub first: Vec<f64>,
    /// `∂ᵢⱼV`; diagonal `V(1/(1+λᵢ²) − 2eᵢ²) + eᵢ²V`, off-diagonal `V eᵢ eⱼ`.
    pub second: Vec<Vec<f64>>,
}

pub fn closed_form_dv(lambda: &[f64]) -> VolumeDerivatives {
    let v: f64 = lambda.iter().map(|l| (1.0 + l * l).sqrt()).product();
    let e: Vec<f64> = lambda.iter().map(|l| l / (1.0 + l * l)).collect();
    let first = e.iter().map(|x| x * v).collect();
    let second = (0..lambda.len())
        .map(|i| {
            (0..lambda.len())
                .map(|j| {
                    if i == j {
                        let l2 = lambda[i] * lambda[i];
                        (1.0 / (1.0 + l2) - 2.0 * e[i] * e[i]) * v + e[i] * e[i] * v
                    } else {
                        v * e[i] * e[j]
                    }
                })
                .collect()
        })
        .collect();
    VolumeDerivatives { v, first, second }
}

/// `C(η) = (1 − (1−η)²) / (1 + (1−η)²)²`.
pub fn convexity_bound(eta: f64) -> f64 {
    let s = (1.0 - eta) * (1.0 - eta);
    (1.0 - s) / ((1.0 + s) * (1.0 + s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckOutcome {
    Pass,
    Fail,
}

/// Sampled convexity certificate of the volume integrand on `‖M‖_op ≤ 1 − η`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityCertificate {
    pub eta: f64,
    pub n: usize,
    pub samples: usize,
    pub seed: u64,
    /// Minimum over samples of the smallest eigenvalue of `D²V(M)` on symmetric matrices.
    pub min_eig: f64,
    #[serde(rename = "C_eta")]
    pub c_eta: f64,
    /// Smallest `∂ᵢᵢV / V` over the diagonal samples and the dense sweep.
    pub diagonal_min: f64,
    pub diagonal_check: CheckOutcome,
    pub uniformly_convex: bool,
}

/// Points of the one-dimensional diagonal sweep.
pub const DIAGONAL_SWEEP: usize = 2001;

pub fn convexity_certificate(eta: f64, n: usize, sample_count: usize, seed: u64) -> Result<ConvexityCertificate> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidArgument(format!("margin {eta} must lie in (0, 1)")));
    }
    if !(1..=MAX_DIM).contains(&n) {
        return Err(Error::InvalidArgument(format!("dimension {n} must be 1, 2 or 3")));
    }
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be at least 1".into()));
    }
    let rho = 1.0 - eta;
    let c_eta = convexity_bound(eta);
    let model = EnergyModel::area(n, rho);
    let per: Vec<Result<(f64, f64)>> = par::map_range(sample_count, |i| {
        let mut rng = sample_rng(seed, i);
        let (m, lambda) = random_sym_in_ball(n, rho, &mut rng);
        let full = model.eval_d2f(&m)?.legendre_min_eigenvalue()?;
        let dv = closed_form_dv(&lambda);
        let diag = (0..n).map(|k| dv.second[k][k] / dv.v).fold(f64::INFINITY, f64::min);
        Ok((full, diag))
    });
    let mut min_eig = f64::INFINITY;
    let mut diagonal_min = f64::INFINITY;
    for r in per {
        let (a, b) = r?;
        min_eig = min_eig.min(a);
        diagonal_min = diagonal_min.min(b);
    }
    // Each diagonal entry depends only on its own eigenvalue beyond the factor V.
    for k in 0..DIAGONAL_SWEEP {
        let l = -rho + 2.0 * rho * k as f64 / (DIAGONAL_SWEEP - 1) as f64;
        let dv = closed_form_dv(&[l]);
        diagonal_min = diagonal_min.min(dv.second[0][0] / dv.v);
    }
    let tol = 1e-14 * (1.0 + c_eta);
    let diagonal_check = if diagonal_min >= c_eta - tol { CheckOutcome::Pass } else { CheckOutcome::Fail };
    Ok(ConvexityCertificate {
        eta,
        n,
        samples: sample_count,
        seed,
        min_eig,
        c_eta,
        diagonal_min,
        diagonal_check,
        uniformly_convex: min_eig > 0.0,
    })
}
