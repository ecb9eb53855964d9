//! Small symmetric matrices, fourth-order coefficient tensors and the dense
//! routines (eigenvalues, quadrature nodes, random rotations) built on them.

use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;
/// Largest number of independent entries of a symmetric matrix, `n(n+1)/2`.
pub const MAX_PACKED: usize = 6;

pub type Dense = [[f64; MAX_DIM]; MAX_DIM];

/// Number of independent entries of a symmetric `n×n` matrix.
pub const fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed index of entry `(i, j)`, upper triangle row by row.
#[inline]
pub fn packed_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Inverse of [`packed_index`].
pub fn packed_pair(n: usize, p: usize) -> (usize, usize) {
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            if idx == p {
                return (i, j);
            }
            idx += 1;
        }
    }
    panic!("packed index {p} out of range for n = {n}");
}

/// Symmetric `n×n` matrix stored as its upper triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymMat {
    n: usize,
    e: [f64; MAX_PACKED],
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "dimension {n} not supported");
        SymMat { n, e: [0.0; MAX_PACKED] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Builds from `f(i, j)` evaluated on the upper triangle only.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.e[packed_index(n, i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        Self::from_fn(d.len(), |i, j| if i == j { d[i] } else { 0.0 })
    }

    pub fn from_packed(n: usize, packed: &[f64]) -> Self {
        assert_eq!(packed.len(), packed_len(n));
        let mut m = Self::zeros(n);
        m.e[..packed.len()].copy_from_slice(packed);
        m
    }

    /// Symmetric part of a dense matrix.
    pub fn from_dense_sym(n: usize, a: &Dense) -> Self {
        Self::from_fn(n, |i, j| 0.5 * (a[i][j] + a[j][i]))
    }

    /// Symmetric unit `(E_ij + E_ji)/2`, so that `<X, S_ij> = X_ij` for symmetric `X`.
    pub fn sym_unit(n: usize, p: usize) -> Self {
        let (a, b) = packed_pair(n, p);
        let mut m = Self::zeros(n);
        m.e[p] = if a == b { 1.0 } else { 0.5 };
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.e[packed_index(self.n, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.e[packed_index(self.n, i, j)] = v;
    }

    #[inline]
    pub fn packed(&self) -> &[f64] {
        &self.e[..packed_len(self.n)]
    }

    #[inline]
    pub fn packed_mut(&mut self) -> &mut [f64] {
        let k = packed_len(self.n);
        &mut self.e[..k]
    }

    pub fn to_dense(&self) -> Dense {
        let mut a = [[0.0; MAX_DIM]; MAX_DIM];
        for (i, row) in a.iter_mut().enumerate().take(self.n) {
            for (j, v) in row.iter_mut().enumerate().take(self.n) {
                *v = self.get(i, j);
            }
        }
        a
    }

    /// Hilbert–Schmidt inner product.
    pub fn dot(&self, other: &SymMat) -> f64 {
        debug_assert_eq!(self.n, other.n);
        let mut s = 0.0;
        for p in 0..packed_len(self.n) {
            s += multiplicity(self.n, p) * self.e[p] * other.e[p];
        }
        s
    }

    /// Hilbert–Schmidt norm.
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.packed().iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        m.packed_mut().iter_mut().for_each(|v| *v *= s);
        m
    }

    /// `self * other` for commuting or general operands; returns the dense product.
    pub fn mul_dense(&self, other: &SymMat) -> Dense {
        matmul(self.n, &self.to_dense(), &other.to_dense())
    }

    /// `M²`, symmetric by construction.
    pub fn square(&self) -> SymMat {
        let d = self.to_dense();
        SymMat::from_fn(self.n, |i, j| (0..self.n).map(|k| d[i][k] * d[k][j]).sum())
    }

    /// `Rᵀ M R`.
    pub fn congruence(&self, r: &Dense) -> SymMat {
        let n = self.n;
        let m = self.to_dense();
        let mr = matmul(n, &m, r);
        SymMat::from_fn(n, |i, j| (0..n).map(|k| r[k][i] * mr[k][j]).sum())
    }

    /// Ascending eigenvalues: closed form for `n = 2`, cyclic Jacobi for `n = 3`.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        match self.n {
            1 => Ok(vec![self.e[0]]),
            2 => {
                let (a, b, c) = (self.e[0], self.e[1], self.e[2]);
                let mean = 0.5 * (a + c);
                let r = (0.5 * (a - c)).hypot(b);
                Ok(vec![mean - r, mean + r])
            }
            _ => {
                let mut a = [[0.0; MAX_PACKED]; MAX_PACKED];
                for i in 0..self.n {
                    for j in 0..self.n {
                        a[i][j] = self.get(i, j);
                    }
                }
                let mut ev = jacobi_eigenvalues(&mut a, self.n, JACOBI_MAX_SWEEPS)?;
                ev.truncate(self.n);
                Ok(ev)
            }
        }
    }

    /// Operator (spectral) norm, `max |λᵢ|`.
    pub fn op_norm(&self) -> f64 {
        match self.eigenvalues() {
            Ok(ev) => ev.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            // The Frobenius norm bounds the spectral norm from above.
            Err(_) => self.norm(),
        }
    }

    pub fn det(&self) -> f64 {
        det(self.n, &self.to_dense())
    }

    /// Inverse of a nonsingular symmetric matrix by cofactors.
    pub fn inverse(&self) -> Option<SymMat> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let a = self.to_dense();
        let inv = match self.n {
            1 => SymMat::from_diag(&[1.0 / a[0][0]]),
            2 => SymMat::from_fn(2, |i, j| match (i, j) {
                (0, 0) => a[1][1] / d,
                (1, 1) => a[0][0] / d,
                _ => -a[0][1] / d,
            }),
            _ => SymMat::from_fn(3, |i, j| {
                // cofactor C_ji / det
                let (r0, r1) = others(j);
                let (c0, c1) = others(i);
                let minor = a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                sign * minor / d
            }),
        };
        Some(inv)
    }
}

fn others(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// 1 for diagonal packed entries, 2 for off-diagonal ones.
#[inline]
pub fn multiplicity(n: usize, p: usize) -> f64 {
    let (i, j) = packed_pair_fast(n, p);
    if i == j {
        1.0
    } else {
        2.0
    }
}

#[inline]
fn packed_pair_fast(n: usize, p: usize) -> (usize, usize) {
    match (n, p) {
        (2, 0) => (0, 0),
        (2, 1) => (0, 1),
        (2, 2) => (1, 1),
        (3, 0) => (0, 0),
        (3, 1) => (0, 1),
        (3, 2) => (0, 2),
        (3, 3) => (1, 1),
        (3, 4) => (1, 2),
        (3, 5) => (2, 2),
        _ => packed_pair(n, p),
    }
}

impl Add for SymMat {
    type Output = SymMat;
    fn add(mut self, rhs: SymMat) -> SymMat {
        debug_assert_eq!(self.n, rhs.n);
        for (a, b) in self.e.iter_mut().zip(rhs.e.iter()) {
            *a += b;
        }
        self
    }
}

impl Sub for SymMat {
    type Output = SymMat;
    fn sub(mut self, rhs: SymMat) -> SymMat {
        debug_assert_eq!(self.n, rhs.n);
        for (a, b) in self.e.iter_mut().zip(rhs.e.iter()) {
            *a -= b;
        }
        self
    }
}

impl Neg for SymMat {
    type Output = SymMat;
    fn neg(self) -> SymMat {
        self.scale(-1.0)
    }
}

impl Mul<f64> for SymMat {
    type Output = SymMat;
    fn mul(self, s: f64) -> SymMat {
        self.scale(s)
    }
}

pub fn matmul(n: usize, a: &Dense, b: &Dense) -> Dense {
    let mut c = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..n {
        for j in 0..n {
            c[i][j] = (0..n).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn det(n: usize, a: &Dense) -> f64 {
    match n {
        1 => a[0][0],
        2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        _ => {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        }
    }
}

/// Fourth-order tensor `T^{ij,kl}` with `T^{ij,kl} = T^{ji,kl} = T^{ij,lk}`,
/// stored as a `k×k` array over packed index pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    e: [[f64; MAX_PACKED]; MAX_PACKED],
}

impl Tensor4 {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n));
        Tensor4 { n, e: [[0.0; MAX_PACKED]; MAX_PACKED] }
    }

    /// Identity on symmetric matrices: `<T σ, τ> = <σ, τ>`.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n);
        for p in 0..packed_len(n) {
            t.e[p][p] = 1.0 / multiplicity(n, p);
        }
        t
    }

    pub fn from_packed_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n);
        let k = packed_len(n);
        for p in 0..k {
            for q in 0..k {
                t.e[p][q] = f(p, q);
            }
        }
        t
    }

    /// Symmetrizes an index function over `(i,j)` and `(k,l)`.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Self {
        Self::from_packed_fn(n, |p, q| {
            let (i, j) = packed_pair(n, p);
            let (k, l) = packed_pair(n, q);
            0.25 * (f(i, j, k, l) + f(j, i, k, l) + f(i, j, l, k) + f(j, i, l, k))
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn packed(&self, p: usize, q: usize) -> f64 {
        self.e[p][q]
    }

    #[inline]
    pub fn set_packed(&mut self, p: usize, q: usize, v: f64) {
        self.e[p][q] = v;
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.e[packed_index(self.n, i, j)][packed_index(self.n, k, l)]
    }

    /// `(Tσ)^{kl} = T^{ij,kl} σ_ij`.
    pub fn contract_first(&self, sigma: &SymMat) -> SymMat {
        let n = self.n;
        let k = packed_len(n);
        let s = sigma.packed();
        let mut out = SymMat::zeros(n);
        let o = out.packed_mut();
        for p in 0..k {
            let w = multiplicity(n, p) * s[p];
            if w == 0.0 {
                continue;
            }
            for q in 0..k {
                o[q] += w * self.e[p][q];
            }
        }
        out
    }

    /// `T^{ij,kl} σ_ij τ_kl`.
    pub fn bilinear(&self, sigma: &SymMat, tau: &SymMat) -> f64 {
        self.contract_first(sigma).dot(tau)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut t = *self;
        for row in t.e.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        t
    }

    pub fn transpose(&self) -> Self {
        Self::from_packed_fn(self.n, |p, q| self.e[q][p])
    }

    pub fn max_abs(&self) -> f64 {
        let k = packed_len(self.n);
        let mut m = 0.0_f64;
        for p in 0..k {
            for q in 0..k {
                m = m.max(self.e[p][q].abs());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        let k = packed_len(self.n);
        (0..k).all(|p| (0..k).all(|q| self.e[p][q].is_finite()))
    }

    /// Matrix of the quadratic form `σ ↦ <Tσ, σ>` in a Frobenius-orthonormal
    /// basis of symmetric matrices (symmetrized).
    pub fn form_matrix(&self) -> [[f64; MAX_PACKED]; MAX_PACKED] {
        let n = self.n;
        let k = packed_len(n);
        let mut a = [[0.0; MAX_PACKED]; MAX_PACKED];
        for p in 0..k {
            let sp = multiplicity(n, p).sqrt();
            for q in 0..k {
                let sq = multiplicity(n, q).sqrt();
                a[p][q] = 0.5 * sp * sq * (self.e[p][q] + self.e[q][p]);
            }
        }
        a
    }

    /// Smallest `Λ` with `<Tσ, σ> ≥ Λ|σ|²` for all symmetric `σ`.
    pub fn legendre_min_eigenvalue(&self) -> Result<f64> {
        let mut a = self.form_matrix();
        let ev = jacobi_eigenvalues(&mut a, packed_len(self.n), JACOBI_MAX_SWEEPS)?;
        Ok(ev[0])
    }
}

impl Add for Tensor4 {
    type Output = Tensor4;
    fn add(self, rhs: Tensor4) -> Tensor4 {
        Tensor4::from_packed_fn(self.n, |p, q| self.e[p][q] + rhs.e[p][q])
    }
}

impl Sub for Tensor4 {
    type Output = Tensor4;
    fn sub(self, rhs: Tensor4) -> Tensor4 {
        Tensor4::from_packed_fn(self.n, |p, q| self.e[p][q] - rhs.e[p][q])
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 30;

/// Cyclic Jacobi eigenvalues of the leading `dim×dim` block, ascending.
/// `a` is overwritten.
pub fn jacobi_eigenvalues(
    a: &mut [[f64; MAX_PACKED]; MAX_PACKED],
    dim: usize,
    max_sweeps: usize,
) -> Result<Vec<f64>> {
    let frob: f64 = (0..dim)
        .flat_map(|i| (0..dim).map(move |j| (i, j)))
        .map(|(i, j)| a[i][j] * a[i][j])
        .sum();
    let tol = (f64::EPSILON * f64::EPSILON) * frob;
    let off = |a: &[[f64; MAX_PACKED]; MAX_PACKED]| -> f64 {
        let mut s = 0.0;
        for i in 0..dim {
            for j in (i + 1)..dim {
                s += a[i][j] * a[i][j];
            }
        }
        s
    };
    let mut converged = off(a) <= tol;
    let mut sweep = 0;
    while !converged && sweep < max_sweeps {
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sgn / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                a[p][q] = 0.0;
                a[q][p] = 0.0;
            }
        }
        sweep += 1;
        converged = off(a) <= tol;
    }
    if !converged {
        return Err(Error::EigenNoConvergence(max_sweeps));
    }
    let mut ev: Vec<f64> = (0..dim).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    Ok(ev)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1);
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(m, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(m, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1,1] -> [0,1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[m - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[m - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Uniformly distributed rotation (Haar measure on SO(n)) via Gram–Schmidt on
/// a Gaussian matrix.
pub fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Dense {
    loop {
        let mut q = [[0.0; MAX_DIM]; MAX_DIM];
        for row in q.iter_mut().take(n) {
            for v in row.iter_mut().take(n) {
                *v = rng.sample(StandardNormal);
            }
        }
        // Orthonormalize columns.
        let mut ok = true;
        for c in 0..n {
            for prev in 0..c {
                let d: f64 = (0..n).map(|r| q[r][c] * q[r][prev]).sum();
                for r in 0..n {
                    q[r][c] -= d * q[r][prev];
                }
            }
            let nrm: f64 = (0..n).map(|r| q[r][c] * q[r][c]).sum::<f64>().sqrt();
            if nrm < 1e-8 {
                ok = false;
                break;
            }
            for row in q.iter_mut().take(n) {
                row[c] /= nrm;
            }
        }
        if !ok {
            continue;
        }
        if det(n, &q) < 0.0 {
            for row in q.iter_mut().take(n) {
                row[0] = -row[0];
            }
        }
        return q;
    }
}

/// Symmetric matrix with eigenvalues uniform in `[-rho, rho]` and a random
/// eigenbasis, together with its eigenvalues.
pub fn random_sym_in_ball<R: Rng + ?Sized>(n: usize, rho: f64, rng: &mut R) -> (SymMat, Vec<f64>) {
    let lambda: Vec<f64> = (0..n)
        .map(|_| if rho > 0.0 { rng.random_range(-rho..=rho) } else { 0.0 })
        .collect();
    let r = random_rotation(n, rng);
    let m = SymMat::from_diag(&lambda).congruence(&transpose(n, &r));
    (m, lambda)
}

pub fn transpose(n: usize, a: &Dense) -> Dense {
    let mut t = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..n {
        for j in 0..n {
            t[i][j] = a[j][i];
        }
    }
    t
}
