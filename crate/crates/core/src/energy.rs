//! Hessian integrands `F(D²u)`, their matrix derivatives, double-divergence
//! coefficient models and the linearized coefficients used by the
//! difference-quotient argument.
//!
//! Derivatives with respect to a symmetric matrix are taken along symmetric
//! perturbations: `dF_ij = DF[S_ij]` with `S_ij = (E_ij + E_ji)/2`, so that
//! `<dF, σ>` is the directional derivative along any symmetric `σ`, and
//! `d²F^{ij,kl} = D²F[S_ij, S_kl]`.

use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{gauss_legendre_unit, packed_len, random_sym_in_ball, SymMat, Tensor4};
use crate::par;

/// Relative step for first matrix derivatives by central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative step for second matrix derivatives by central differences.
pub const FD_STEP_SECOND: f64 = 1e-3;
/// Default Gauss–Legendre node count along `t ∈ [0, 1]`.
pub const DEFAULT_QUAD_NODES: usize = 8;

pub type ScalarFn = Arc<dyn Fn(&SymMat) -> f64 + Send + Sync>;
pub type TensorFn = Arc<dyn Fn(&SymMat) -> Tensor4 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Quadratic,
    Area,
    Custom,
}

/// A convex integrand on the admissible set `U = {M : ‖M‖_op ≤ ρ_U}`.
#[derive(Clone)]
pub struct EnergyModel {
    kind: ModelKind,
    name: String,
    dim: usize,
    radius: f64,
    sign: f64,
    custom: Option<ScalarFn>,
    lambda: Option<f64>,
}

impl fmt::Debug for EnergyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnergyModel")
            .field("kind", &self.kind)
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("radius", &self.radius)
            .field("sign", &self.sign)
            .field("lambda", &self.lambda)
            .finish()
    }
}

impl EnergyModel {
    /// `F(M) = ½|M|²` on all of `S^{n×n}`.
    pub fn quadratic(dim: usize) -> Self {
        EnergyModel {
            kind: ModelKind::Quadratic,
            name: "quadratic".into(),
            dim,
            radius: f64::INFINITY,
            sign: 1.0,
            custom: None,
            lambda: Some(1.0),
        }
    }

    /// Area integrand `√det(I + M²)` restricted to `‖M‖_op ≤ radius`.
    pub fn area(dim: usize, radius: f64) -> Self {
        EnergyModel {
            kind: ModelKind::Area,
            name: "area".into(),
            dim,
            radius,
            sign: 1.0,
            custom: None,
            lambda: None,
        }
    }

    /// Area integrand on `‖M‖_op ≤ 1 − η`.
    pub fn area_with_margin(dim: usize, eta: f64) -> Self {
        Self::area(dim, 1.0 - eta)
    }

    /// User-supplied integrand; derivatives by central differences.
    pub fn custom(dim: usize, name: impl Into<String>, radius: f64, f: ScalarFn) -> Self {
        EnergyModel {
            kind: ModelKind::Custom,
            name: name.into(),
            dim,
            radius,
            sign: 1.0,
            custom: Some(f),
            lambda: None,
        }
    }

    /// Integrand interpolated from a coefficient table.
    pub fn from_table(table: CoefficientTable, radius: f64) -> Self {
        let dim = table.dim;
        let t = Arc::new(table);
        Self::custom(dim, "table", radius, Arc::new(move |m: &SymMat| t.interpolate(m)))
    }

    /// `−F`, used to turn a uniformly concave integrand into a convex one.
    pub fn negated(mut self) -> Self {
        self.sign = -self.sign;
        self.lambda = None;
        self
    }

    pub fn with_ellipticity(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// `ρ_U`.
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn supplied_ellipticity(&self) -> Option<f64> {
        self.lambda
    }

    pub fn check_admissible(&self, m: &SymMat) -> Result<()> {
        if !m.is_finite() {
            return Err(Error::Inadmissible { node: None, norm: f64::NAN, bound: self.radius });
        }
        if self.radius.is_infinite() {
            return Ok(());
        }
        let norm = m.op_norm();
        if norm > self.radius {
            return Err(Error::Inadmissible { node: None, norm, bound: self.radius });
        }
        Ok(())
    }

    fn raw_f(&self, m: &SymMat) -> f64 {
        match self.kind {
            ModelKind::Quadratic => 0.5 * m.dot(m),
            ModelKind::Area => area_value(m),
            ModelKind::Custom => (self.custom.as_ref().expect("custom integrand"))(m),
        }
    }

    /// `F(M)` without the admissibility check.
    pub fn value_unchecked(&self, m: &SymMat) -> f64 {
        self.sign * self.raw_f(m)
    }

    /// `dF(M)` without the admissibility check.
    pub fn gradient_unchecked(&self, m: &SymMat) -> SymMat {
        let g = match self.kind {
            ModelKind::Quadratic => *m,
            ModelKind::Area => area_gradient(m),
            ModelKind::Custom => fd_gradient(&|x: &SymMat| self.raw_f(x), m),
        };
        g.scale(self.sign)
    }

    /// `d²F(M)` without the admissibility check.
    pub fn hessian_unchecked(&self, m: &SymMat) -> Tensor4 {
        let t = match self.kind {
            ModelKind::Quadratic => Tensor4::identity(self.dim),
            ModelKind::Area => area_hessian(m),
            ModelKind::Custom => fd_hessian(&|x: &SymMat| self.raw_f(x), m),
        };
        t.scale(self.sign)
    }

    /// `F(M)`.
    pub fn eval_f(&self, m: &SymMat) -> Result<f64> {
        self.check_admissible(m)?;
        Ok(self.value_unchecked(m))
    }

    /// `F^{ij}(M) = ∂F/∂M_ij`.
    pub fn eval_df(&self, m: &SymMat) -> Result<SymMat> {
        self.check_admissible(m)?;
        Ok(self.gradient_unchecked(m))
    }

    /// `F^{ij,kl}(M)`.
    pub fn eval_d2f(&self, m: &SymMat) -> Result<Tensor4> {
        self.check_admissible(m)?;
        Ok(self.hessian_unchecked(m))
    }
}

/// `√det(I + M²)`.
pub fn area_value(m: &SymMat) -> f64 {
    let g = SymMat::identity(m.dim()) + m.square();
    g.det().sqrt()
}

fn area_parts(m: &SymMat) -> (f64, SymMat, SymMat) {
    let n = m.dim();
    let g = SymMat::identity(n) + m.square();
    let v = g.det().sqrt();
    let ginv = g.inverse().expect("I + M² is positive definite");
    let gm = SymMat::from_dense_sym(n, &ginv.mul_dense(m));
    (v, ginv, gm)
}

/// `dV = V g⁻¹ M` with `g = I + M²`.
pub fn area_gradient(m: &SymMat) -> SymMat {
    let (v, _, gm) = area_parts(m);
    gm.scale(v)
}

/// `D²V[σ, τ] = V (<G,σ><G,τ> + tr(g⁻¹σg⁻¹τ) − tr(GσGτ))` with `G = g⁻¹M`.
pub fn area_hessian(m: &SymMat) -> Tensor4 {
    let n = m.dim();
    let (v, ginv, gm) = area_parts(m);
    let k = packed_len(n);
    let units: Vec<SymMat> = (0..k).map(|p| SymMat::sym_unit(n, p)).collect();
    let gi = ginv.to_dense();
    let gd = gm.to_dense();
    let trace4 = |a: &crate::linalg::Dense, s: &SymMat, b: &crate::linalg::Dense, t: &SymMat| -> f64 {
        let s = s.to_dense();
        let t = t.to_dense();
        let x = crate::linalg::matmul(n, &crate::linalg::matmul(n, a, &s), &crate::linalg::matmul(n, b, &t));
        (0..n).map(|i| x[i][i]).sum()
    };
    let mut out = Tensor4::zeros(n);
    for p in 0..k {
        for q in p..k {
            let (sp, sq) = (&units[p], &units[q]);
            let val = v * (gm.dot(sp) * gm.dot(sq) + trace4(&gi, sp, &gi, sq) - trace4(&gd, sp, &gd, sq));
            out.set_packed(p, q, val);
            out.set_packed(q, p, val);
        }
    }
    out
}

fn fd_step(m: &SymMat, rel: f64) -> f64 {
    rel * (1.0 + m.norm())
}

/// Central differences with one Richardson step along each `S_p`.
pub fn fd_gradient(f: &dyn Fn(&SymMat) -> f64, m: &SymMat) -> SymMat {
    let n = m.dim();
    let d = fd_step(m, FD_STEP);
    let mut g = SymMat::zeros(n);
    for p in 0..packed_len(n) {
        let s = SymMat::sym_unit(n, p);
        let central = |h: f64| (f(&(*m + s.scale(h))) - f(&(*m - s.scale(h)))) / (2.0 * h);
        let (a, b) = (central(d), central(0.5 * d));
        g.packed_mut()[p] = (4.0 * b - a) / 3.0;
    }
    g
}

/// Mixed central second differences with one Richardson step.
pub fn fd_hessian(f: &dyn Fn(&SymMat) -> f64, m: &SymMat) -> Tensor4 {
    let n = m.dim();
    let d = fd_step(m, FD_STEP_SECOND);
    let k = packed_len(n);
    let units: Vec<SymMat> = (0..k).map(|p| SymMat::sym_unit(n, p)).collect();
    let mut t = Tensor4::zeros(n);
    for p in 0..k {
        for q in p..k {
            let (sp, sq) = (units[p], units[q]);
            let mixed = |h: f64| {
                (f(&(*m + sp.scale(h) + sq.scale(h))) - f(&(*m + sp.scale(h) - sq.scale(h)))
                    - f(&(*m - sp.scale(h) + sq.scale(h)))
                    + f(&(*m - sp.scale(h) - sq.scale(h))))
                    / (4.0 * h * h)
            };
            let (a, b) = (mixed(d), mixed(0.5 * d));
            let v = (4.0 * b - a) / 3.0;
            t.set_packed(p, q, v);
            t.set_packed(q, p, v);
        }
    }
    t
}

/// Sampled Legendre constant of a model.
#[derive(Clone, Debug, Serialize)]
pub struct EllipticityEstimate {
    /// Minimum over samples of the smallest eigenvalue of `σ ↦ <d²F σ, σ>`.
    pub lambda: f64,
    pub samples: usize,
    pub seed: u64,
    pub uniformly_convex: bool,
    /// Sample attaining the minimum, packed.
    pub worst: Vec<f64>,
}

/// Per-sample generator: one ChaCha stream per sample index.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Minimum over `sample_count` random `ξ ∈ U` of the Legendre eigenvalue of
/// `F^{ij,kl}(ξ)`. Deterministic for a given seed.
pub fn ellipticity_constant(model: &EnergyModel, sample_count: usize, seed: u64) -> Result<EllipticityEstimate> {
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be at least 1".into()));
    }
    let rho = if model.radius.is_finite() { model.radius } else { 1.0 };
    let n = model.dim;
    let vals: Vec<Result<(f64, SymMat)>> = par::map_range(sample_count, |i| {
        let mut rng = sample_rng(seed, i);
        let (m, _) = random_sym_in_ball(n, rho, &mut rng);
        let t = model.hessian_unchecked(&m);
        Ok((t.legendre_min_eigenvalue()?, m))
    });
    let mut best: Option<(f64, SymMat)> = None;
    for v in vals {
        let (l, m) = v?;
        if best.as_ref().map_or(true, |(b, _)| l < *b) {
            best = Some((l, m));
        }
    }
    let (lambda, worst) = best.expect("at least one sample");
    Ok(EllipticityEstimate {
        lambda,
        samples: sample_count,
        seed,
        uniformly_convex: lambda > 0.0,
        worst: worst.packed().to_vec(),
    })
}

fn check_segment(radius: f64, a: &SymMat, b: &SymMat) -> Result<()> {
    // U is a ball, hence convex: the endpoints decide.
    for m in [a, b] {
        if !m.is_finite() {
            return Err(Error::Inadmissible { node: None, norm: f64::NAN, bound: radius });
        }
        if radius.is_finite() {
            let norm = m.op_norm();
            if norm > radius {
                return Err(Error::Inadmissible { node: None, norm, bound: radius });
            }
        }
    }
    Ok(())
}

/// `β^{ij,kl} = ∫₀¹ F^{ij,kl}(M + t(M_shift − M)) dt` by Gauss–Legendre.
pub fn linearized_coefficients(
    model: &EnergyModel,
    m: &SymMat,
    m_shift: &SymMat,
    quad_nodes: usize,
) -> Result<Tensor4> {
    check_segment(model.radius, m, m_shift)?;
    let (t, w) = gauss_legendre_unit(quad_nodes.max(1));
    let d = *m_shift - *m;
    let mut acc = Tensor4::zeros(model.dim);
    for (tk, wk) in t.iter().zip(&w) {
        acc = acc + model.hessian_unchecked(&(*m + d.scale(*tk))).scale(*wk);
    }
    Ok(acc)
}

/// Coefficient model `a^{ij,kl}(D²u)` of a double-divergence equation
/// `∫ a^{ij,kl}(D²u) u_ij η_kl = 0`.
#[derive(Clone)]
pub enum DdKind {
    Constant(Tensor4),
    /// `a^{(ik),(jl)} = √det g · g^{ij} δ^{kl}`, `g = I + M²`.
    HamiltonianStationary,
    Custom(TensorFn),
}

#[derive(Clone)]
pub struct DoubleDivergenceModel {
    kind: DdKind,
    dim: usize,
    radius: f64,
}

impl fmt::Debug for DoubleDivergenceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            DdKind::Constant(_) => "constant",
            DdKind::HamiltonianStationary => "hamiltonian-stationary",
            DdKind::Custom(_) => "custom",
        };
        write!(f, "DoubleDivergenceModel({kind}, n = {}, radius = {})", self.dim, self.radius)
    }
}

impl DoubleDivergenceModel {
    pub fn constant(t: Tensor4) -> Self {
        DoubleDivergenceModel { dim: t.dim(), kind: DdKind::Constant(t), radius: f64::INFINITY }
    }

    pub fn hamiltonian_stationary(dim: usize, radius: f64) -> Self {
        DoubleDivergenceModel { kind: DdKind::HamiltonianStationary, dim, radius }
    }

    pub fn custom(dim: usize, radius: f64, a: TensorFn) -> Self {
        DoubleDivergenceModel { kind: DdKind::Custom(a), dim, radius }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn kind(&self) -> &DdKind {
        &self.kind
    }

    /// `a^{ij,kl}(M)`, symmetrized over both index pairs.
    pub fn coefficients(&self, m: &SymMat) -> Tensor4 {
        match &self.kind {
            DdKind::Constant(t) => *t,
            DdKind::HamiltonianStationary => {
                let n = m.dim();
                let g = SymMat::identity(n) + m.square();
                let v = g.det().sqrt();
                let ginv = g.inverse().expect("I + M² is positive definite");
                Tensor4::from_fn(n, |i, k, j, l| if k == l { v * ginv.get(i, j) } else { 0.0 })
            }
            DdKind::Custom(f) => f(m),
        }
    }

    /// `A^{kl} = a^{ij,kl}(M) M_ij`, the field paired with `η_kl`.
    pub fn flux(&self, m: &SymMat) -> SymMat {
        self.coefficients(m).contract_first(m)
    }
}

/// `b^{ij,kl} = ∫₀¹ [a^{ij,kl}(M_t) + ∂a^{pq,kl}/∂u_ij(M_t) M_pq] dt` with
/// `M_t = M + t(M_shift − M)` and `M` frozen in the second term.
pub fn linearized_coefficients_dd(
    model: &DoubleDivergenceModel,
    m: &SymMat,
    m_shift: &SymMat,
    quad_nodes: usize,
) -> Result<Tensor4> {
    check_segment(model.radius, m, m_shift)?;
    let n = model.dim;
    let (t, w) = gauss_legendre_unit(quad_nodes.max(1));
    let d = *m_shift - *m;
    let k = packed_len(n);
    let mut acc = Tensor4::zeros(n);
    for (tk, wk) in t.iter().zip(&w) {
        let x = *m + d.scale(*tk);
        let a = model.coefficients(&x);
        let mut b = a;
        if !matches!(model.kind, DdKind::Constant(_)) {
            let h = fd_step(&x, FD_STEP);
            for p in 0..k {
                let s = SymMat::sym_unit(n, p);
                let central = |hh: f64| {
                    let plus = model.coefficients(&(x + s.scale(hh))).contract_first(m);
                    let minus = model.coefficients(&(x - s.scale(hh))).contract_first(m);
                    (plus - minus).scale(1.0 / (2.0 * hh))
                };
                let (c1, c2) = (central(h), central(0.5 * h));
                let deriv = (c2.scale(4.0) - c1).scale(1.0 / 3.0);
                for q in 0..k {
                    b.set_packed(p, q, b.packed(p, q) + deriv.packed()[q]);
                }
            }
        }
        acc = acc + b.scale(*wk);
    }
    Ok(acc)
}

/// Integrand values on a uniform lattice in packed-matrix coordinates,
/// evaluated by multilinear interpolation.
///
/// CSV schema: a header line `n,points,lo,hi`, then rows `index,value` where
/// `index` flattens the lattice position over the `n(n+1)/2` packed
/// coordinates, first coordinate slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientTable {
    pub dim: usize,
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub values: Vec<f64>,
}

impl CoefficientTable {
    pub fn sample(dim: usize, points: usize, lo: f64, hi: f64, f: impl Fn(&SymMat) -> f64) -> Result<Self> {
        let mut t = CoefficientTable { dim, points, lo, hi, values: Vec::new() };
        t.validate_shape()?;
        let k = packed_len(dim);
        let total = points.pow(k as u32);
        t.values = (0..total)
            .map(|idx| {
                let mut e = vec![0.0; k];
                let mut rest = idx;
                for c in (0..k).rev() {
                    e[c] = t.coord(rest % points);
                    rest /= points;
                }
                f(&SymMat::from_packed(dim, &e))
            })
            .collect();
        Ok(t)
    }

    fn validate_shape(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) || self.points < 2 || !(self.lo < self.hi) {
            return Err(Error::Format(format!(
                "bad table shape n = {}, points = {}, range [{}, {}]",
                self.dim, self.points, self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn coord(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64
    }

    pub fn from_csv(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty table".into()))??;
        let h: Vec<&str> = header.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Format(format!("table header: bad {what}"));
        if h.len() != 4 {
            return Err(Error::Format("table header must be n,points,lo,hi".into()));
        }
        let mut t = CoefficientTable {
            dim: h[0].parse().map_err(|_| bad("n"))?,
            points: h[1].parse().map_err(|_| bad("points"))?,
            lo: h[2].parse().map_err(|_| bad("lo"))?,
            hi: h[3].parse().map_err(|_| bad("hi"))?,
            values: Vec::new(),
        };
        t.validate_shape()?;
        let total = t.points.pow(packed_len(t.dim) as u32);
        let mut values = vec![f64::NAN; total];
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (i, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("table line {}: expected index,value", ln + 2)))?;
            let i: usize = i.trim().parse().map_err(|_| Error::Format(format!("table line {}: index", ln + 2)))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Format(format!("table line {}: value", ln + 2)))?;
            if i >= total {
                return Err(Error::Format(format!("table line {}: index {i} out of range", ln + 2)));
            }
            values[i] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Format("table is missing lattice entries".into()));
        }
        t.values = values;
        Ok(t)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{},{}\n", self.dim, self.points, self.lo, self.hi);
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }

    /// Multilinear interpolation; coordinates are clamped to the lattice box.
    pub fn interpolate(&self, m: &SymMat) -> f64 {
        let k = packed_len(self.dim);
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        let mut base = vec![0usize; k];
        let mut frac = vec![0.0; k];
        for c in 0..k {
            let x = ((m.packed()[c] - self.lo) / step).clamp(0.0, (self.points - 1) as f64);
            let i = (x.floor() as usize).min(self.points - 2);
            base[c] = i;
            frac[c] = x - i as f64;
        }
        let mut sum = 0.0;
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            let mut idx = 0;
            for c in 0..k {
                let bit = (corner >> (k - 1 - c)) & 1;
                w *= if bit == 1 { frac[c] } else { 1.0 - frac[c] };
                idx = idx * self.points + base[c] + bit;
            }
            if w != 0.0 {
                sum += w * self.values[idx];
            }
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_sym(n: usize, scale: f64, rng: &mut impl Rng) -> SymMat {
        SymMat::from_fn(n, |_, _| rng.random_range(-scale..scale))
    }

    // Test-side oracle: plain central differences, Richardson over ε and ε/2.
    fn oracle_directional(f: &dyn Fn(&SymMat) -> f64, m: &SymMat, s: &SymMat, eps: f64) -> f64 {
        let c = |e: f64| (f(&(*m + s.scale(e))) - f(&(*m - s.scale(e)))) / (2.0 * e);
        (4.0 * c(0.5 * eps) - c(eps)) / 3.0
    }

    #[test]
    fn values_at_reference_points() {
        let q = EnergyModel::quadratic(2);
        assert_eq!(q.eval_f(&SymMat::zeros(2)).unwrap(), 0.0);
        let a = EnergyModel::area(2, 1.0);
        assert_eq!(a.eval_f(&SymMat::zeros(2)).unwrap(), 1.0);
        assert_relative_eq!(a.eval_f(&SymMat::from_diag(&[1.0, 1.0])).unwrap(), 2.0, epsilon = 1e-15);
        assert!(matches!(a.eval_f(&SymMat::from_diag(&[1.5, 0.0])), Err(Error::Inadmissible { .. })));
    }

    #[test]
    fn area_gradient_matches_eigen_formula() {
        let lam = [0.3, -0.7];
        let m = SymMat::from_diag(&lam);
        let v = area_value(&m);
        let g = EnergyModel::area(2, 1.0).eval_df(&m).unwrap();
        for i in 0..2 {
            assert_relative_eq!(g.get(i, i), lam[i] / (1.0 + lam[i] * lam[i]) * v, epsilon = 1e-15);
        }
        assert_relative_eq!(g.get(0, 1), 0.0, epsilon = 1e-15);
        let q = EnergyModel::quadratic(3);
        let m = SymMat::from_fn(3, |i, j| (i + 2 * j) as f64 * 0.1);
        assert_eq!(q.eval_df(&m).unwrap(), m);
    }

    #[test]
    fn area_hessian_diagonal_directions() {
        let lam = [0.4, -0.2, 0.6];
        let m = SymMat::from_diag(&lam);
        let v = area_value(&m);
        let t = EnergyModel::area(3, 1.0).eval_d2f(&m).unwrap();
        let e: Vec<f64> = lam.iter().map(|l| l / (1.0 + l * l)).collect();
        for i in 0..3 {
            let di = SymMat::sym_unit(3, crate::linalg::packed_index(3, i, i));
            for j in 0..3 {
                let dj = SymMat::sym_unit(3, crate::linalg::packed_index(3, j, j));
                let want = if i == j { v / (1.0 + lam[i] * lam[i]).powi(2) } else { v * e[i] * e[j] };
                assert_relative_eq!(t.bilinear(&di, &dj), want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = sample_rng(5, 0);
        for n in 2..=3 {
            for model in [EnergyModel::quadratic(n), EnergyModel::area(n, 0.95)] {
                for _ in 0..20 {
                    let (m, _) = random_sym_in_ball(n, 0.9, &mut rng);
                    let g = model.eval_df(&m).unwrap();
                    let t = model.eval_d2f(&m).unwrap();
                    let s = random_sym(n, 1.0, &mut rng);
                    let tau = random_sym(n, 1.0, &mut rng);
                    let f = |x: &SymMat| model.value_unchecked(x);
                    let want = oracle_directional(&f, &m, &s, 1e-4);
                    assert_relative_eq!(g.dot(&s), want, max_relative = 1e-7, epsilon = 1e-10);
                    let gd = |x: &SymMat| model.gradient_unchecked(x).dot(&tau);
                    let want2 = oracle_directional(&gd, &m, &s, 1e-4);
                    assert_relative_eq!(t.bilinear(&s, &tau), want2, max_relative = 1e-6, epsilon = 1e-9);
                    // Symmetric bilinear form.
                    assert_relative_eq!(t.bilinear(&s, &tau), t.bilinear(&tau, &s), epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn custom_model_finite_differences() {
        // F = exp(tr M) + |M|⁴ has gradient exp(tr M) I + 4|M|² M.
        let f: ScalarFn = Arc::new(|m: &SymMat| m.trace().exp() + m.dot(m).powi(2));
        let model = EnergyModel::custom(2, "exp-quartic", 2.0, f.clone());
        let mut rng = sample_rng(9, 0);
        for _ in 0..10 {
            let m = random_sym(2, 0.8, &mut rng);
            let g = model.eval_df(&m).unwrap();
            let exact = SymMat::identity(2).scale(m.trace().exp()) + m.scale(4.0 * m.dot(&m));
            assert!((g - exact).norm() <= 1e-8 * exact.norm());
            for p in 0..3 {
                let s = SymMat::sym_unit(2, p);
                let d = (m.norm() + 1.0) * FD_STEP;
                let want = oracle_directional(&|x: &SymMat| f(x), &m, &s, d);
                assert_relative_eq!(g.packed()[p], want, max_relative = 1e-8, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ellipticity_examples() {
        let q = ellipticity_constant(&EnergyModel::quadratic(3), 10, 1).unwrap();
        assert_relative_eq!(q.lambda, 1.0, epsilon = 1e-14);
        let a0 = ellipticity_constant(&EnergyModel::area(2, 0.0), 5, 1).unwrap();
        assert_relative_eq!(a0.lambda, 1.0, epsilon = 1e-14);
        let a = ellipticity_constant(&EnergyModel::area(2, 0.9), 2000, 3).unwrap();
        let bound = (1.0 - 0.81) / (1.0f64 + 0.81).powi(2);
        assert!(a.lambda >= bound, "{} < {bound}", a.lambda);
        assert!(a.uniformly_convex);
        // Brute-force minimum over a dense diagonal sweep.
        let mut brute = f64::INFINITY;
        for i in 0..=90 {
            for j in 0..=90 {
                let m = SymMat::from_diag(&[-0.9 + 0.02 * i as f64, -0.9 + 0.02 * j as f64]);
                brute = brute.min(area_hessian(&m).legendre_min_eigenvalue().unwrap());
            }
        }
        assert!(brute >= bound - 1e-12);
        assert!(a.lambda >= brute - 1e-12 || a.lambda >= bound);
        for eta in [0.5, 0.25, 0.1] {
            let e = ellipticity_constant(&EnergyModel::area_with_margin(2, eta), 200, 7).unwrap();
            assert!(e.lambda > 0.0);
        }
        let again = ellipticity_constant(&EnergyModel::area(2, 0.9), 2000, 3).unwrap();
        assert_eq!(a.lambda.to_bits(), again.lambda.to_bits());
        assert!(ellipticity_constant(&EnergyModel::quadratic(2), 0, 1).is_err());
        // A concave integrand is flagged, not rejected.
        let neg = ellipticity_constant(&EnergyModel::quadratic(2).negated(), 3, 1).unwrap();
        assert!(!neg.uniformly_convex);
    }

    #[test]
    fn linearized_coefficient_examples() {
        let q = EnergyModel::quadratic(2);
        let m = SymMat::from_fn(2, |i, j| 0.1 * (i + j) as f64);
        let ms = SymMat::from_fn(2, |i, j| 0.3 - 0.2 * (i * j) as f64);
        assert_eq!(linearized_coefficients(&q, &m, &ms, 8).unwrap(), Tensor4::identity(2));

        let a = EnergyModel::area(2, 0.9);
        let b = linearized_coefficients(&a, &m, &m, 8).unwrap();
        let want = a.eval_d2f(&m).unwrap();
        assert!((b - want).max_abs() <= 1e-14 * want.max_abs());

        let fine = linearized_coefficients(&a, &m, &ms, 80).unwrap();
        let coarse = linearized_coefficients(&a, &m, &ms, 8).unwrap();
        assert!((fine - coarse).max_abs() <= 1e-10 * fine.max_abs());

        let out = SymMat::from_diag(&[0.95, 0.0]);
        assert!(linearized_coefficients(&a, &m, &out, 8).is_err());
    }

    #[test]
    fn dd_linearization_examples() {
        let c = Tensor4::from_fn(2, |i, j, k, l| {
            let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
            2.0 * d(i, k) * d(j, l) + 0.5 * d(i, j) * d(k, l)
        });
        let model = DoubleDivergenceModel::constant(c);
        let m = SymMat::from_fn(2, |i, j| 0.05 * (1 + i + j) as f64);
        let ms = m.scale(-1.0);
        assert_eq!(linearized_coefficients_dd(&model, &m, &ms, 8).unwrap(), c);

        // M_shift = M: b = a(M) + ∂a^{pq,kl}/∂u_ij(M) M_pq, right side by an
        // independent forward/backward difference in the test.
        let hs = DoubleDivergenceModel::hamiltonian_stationary(2, 0.5);
        let b = linearized_coefficients_dd(&hs, &m, &m, 8).unwrap();
        let a = hs.coefficients(&m);
        let eps = 1e-6;
        for p in 0..3 {
            let s = SymMat::sym_unit(2, p);
            let plus = hs.coefficients(&(m + s.scale(eps))).contract_first(&m);
            let minus = hs.coefficients(&(m - s.scale(eps))).contract_first(&m);
            let der = (plus - minus).scale(0.5 / eps);
            for q in 0..3 {
                assert_relative_eq!(b.packed(p, q), a.packed(p, q) + der.packed()[q], epsilon = 1e-8);
            }
        }
        // For the hstat model this is the area Hessian.
        let want = area_hessian(&m);
        assert!((b - want).max_abs() < 1e-8);

        let mut rng = sample_rng(21, 0);
        for _ in 0..50 {
            let (m, _) = random_sym_in_ball(2, 0.1, &mut rng);
            let (ms, _) = random_sym_in_ball(2, 0.1, &mut rng);
            let b = linearized_coefficients_dd(&hs, &m, &ms, 8).unwrap();
            assert!(b.legendre_min_eigenvalue().unwrap() > 0.0);
        }
    }

    #[test]
    fn coefficient_table_roundtrip_and_interpolation() {
        let lin = |m: &SymMat| 1.0 + 2.0 * m.packed()[0] - m.packed()[1] + 0.5 * m.packed()[2];
        let t = CoefficientTable::sample(2, 5, -1.0, 1.0, lin).unwrap();
        let parsed = CoefficientTable::from_csv(t.to_csv().as_bytes()).unwrap();
        assert_eq!(parsed, t);
        let m = SymMat::from_packed(2, &[0.13, -0.41, 0.77]);
        assert_relative_eq!(t.interpolate(&m), lin(&m), epsilon = 1e-14);
        let model = EnergyModel::from_table(t, 1.5);
        let g = model.eval_df(&m).unwrap();
        assert_relative_eq!(g.packed()[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(g.packed()[1], -0.5, epsilon = 1e-8);
        assert!(CoefficientTable::from_csv("2,5,-1,1\n0,1.0\n".as_bytes()).is_err());
    }
}
