//! Oscillation and integrability diagnostics for matrix fields: mean
//! oscillation, BMO modulus, John–Nirenberg ratios, Campanato decay,
//! reverse-Hölder constants, higher-integrability exponents, singular-set
//! masks, Hölder seminorms and the iteration-lemma checker.
//!
//! Norms of matrices are Frobenius norms. Ball averages use the discrete
//! measure (node count times `hⁿ`).

use rand::Rng;
use serde::Serialize;

use crate::energy::sample_rng;
use crate::error::{Error, Result};
use crate::grid::{Ball, BallFamily, GridGeometry, SymMatField};
use crate::linalg::{SymMat, MAX_DIM};
use crate::par;

/// Default `p₀` scan `{2.1, 2.2, …, 4.0}`.
pub fn default_p0_scan() -> Vec<f64> {
    (21..=40).map(|k| k as f64 / 10.0).collect()
}
pub const DEFAULT_K_MAX: f64 = 10.0;

/// `2n/(n+2)`.
pub fn gehring_exponent(n: usize) -> f64 {
    2.0 * n as f64 / (n as f64 + 2.0)
}

/// Nodes of `ball`, checked against the grid interior and the field region.
fn ball_nodes(field: &SymMatField, ball: &Ball) -> Result<Vec<usize>> {
    let geom = field.geometry();
    ball.validate(geom)?;
    let nodes = ball.nodes(geom);
    if nodes.is_empty() {
        return Err(Error::EmptyRegion(format!("ball {:?}", ball)));
    }
    if nodes.iter().any(|&i| !field.region()[i]) {
        return Err(Error::RegionMismatch(format!(
            "ball at {:?} of radius {} leaves the field region",
            ball.center, ball.radius
        )));
    }
    Ok(nodes)
}

/// Deviations `f(x) − (f)_B`, computed from differences to the value at the
/// first node so that adding a constant does not perturb them.
fn deviations(field: &SymMatField, nodes: &[usize]) -> Vec<SymMat> {
    let base = *field.at(nodes[0]);
    let diffs: Vec<SymMat> = nodes.iter().map(|&i| *field.at(i) - base).collect();
    let n = field.dim();
    let mut mean = SymMat::zeros(n);
    for d in &diffs {
        mean = mean + *d;
    }
    let mean = mean.scale(1.0 / nodes.len() as f64);
    diffs.into_iter().map(|d| d - mean).collect()
}

fn powered_norm(m: &SymMat, p: f64) -> f64 {
    let x = m.norm();
    if p == 1.0 {
        x
    } else if p == 2.0 {
        m.dot(m)
    } else {
        x.powf(p)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("exponent {p} must be at least 1")));
    }
    Ok(())
}

/// `(1/|B|) ∫_B |f − (f)_B|^p`.
pub fn mean_oscillation(field: &SymMatField, ball: &Ball, p: f64) -> Result<f64> {
    check_p(p)?;
    let nodes = ball_nodes(field, ball)?;
    Ok(oscillation_on(field, &nodes, p))
}

fn oscillation_on(field: &SymMatField, nodes: &[usize], p: f64) -> f64 {
    let dev = deviations(field, nodes);
    dev.iter().map(|d| powered_norm(d, p)).sum::<f64>() / nodes.len() as f64
}

/// `(1/|B|) ∫_B |f|^p`.
fn mean_power(field: &SymMatField, nodes: &[usize], p: f64) -> f64 {
    nodes.iter().map(|&i| powered_norm(field.at(i), p)).sum::<f64>() / nodes.len() as f64
}

/// Sampled BMO modulus with the attaining ball.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BmoEstimate {
    pub omega: f64,
    pub ball: Ball,
    /// Oscillation per family member, in family order.
    pub per_ball: Vec<f64>,
}

/// `ω = max_B (1/|B|) ∫_B |f − (f)_B|` over the family.
pub fn bmo_modulus(field: &SymMatField, family: &BallFamily) -> Result<BmoEstimate> {
    if family.is_empty() {
        return Err(Error::BallFamily("empty family".into()));
    }
    let vals: Vec<Result<f64>> = par::map_slice(&family.balls, |b| mean_oscillation(field, b, 1.0));
    let per_ball: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    let (k, omega) = first_max(&per_ball);
    Ok(BmoEstimate { omega, ball: family.balls[k].clone(), per_ball })
}

fn first_max(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// John–Nirenberg ratio estimate `C̄ = max_B osc_p(B) / ω`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JnEstimate {
    pub p: f64,
    /// `None` when `ω = 0`.
    pub cbar: Option<f64>,
    pub omega: f64,
    pub ball: Ball,
    pub degenerate: bool,
}

pub fn john_nirenberg_ratio(field: &SymMatField, family: &BallFamily, p: f64) -> Result<JnEstimate> {
    check_p(p)?;
    let bmo = bmo_modulus(field, family)?;
    let vals: Vec<Result<f64>> = par::map_slice(&family.balls, |b| mean_oscillation(field, b, p));
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    let (k, top) = first_max(&vals);
    if bmo.omega == 0.0 {
        return Ok(JnEstimate { p, cbar: None, omega: 0.0, ball: family.balls[k].clone(), degenerate: true });
    }
    Ok(JnEstimate { p, cbar: Some(top / bmo.omega), omega: bmo.omega, ball: family.balls[k].clone(), degenerate: false })
}

/// Oscillations on concentric balls of decreasing radius.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OscillationCurve {
    pub center: Vec<usize>,
    pub radii: Vec<f64>,
    /// `(1/|B_r|) ∫_{B_r} |f − (f)_r|^p`.
    pub values: Vec<f64>,
    /// `∫_{B_r} |f − (f)_r|^p`.
    pub integrals: Vec<f64>,
    pub p: f64,
}

/// Log-log least-squares fit `log I = log c + γ log ρ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub constant: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points: usize,
    /// Some integral vanished, so no power law was fitted.
    pub degenerate: bool,
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, rms)`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - icept - slope * a).powi(2)).sum::<f64>() / m).sqrt();
    (slope, icept, rms)
}

pub fn campanato_decay(
    field: &SymMatField,
    center: &[usize],
    radii: &[f64],
    p: f64,
) -> Result<(OscillationCurve, DecayFit)> {
    check_p(p)?;
    if radii.len() < 3 {
        return Err(Error::InvalidArgument(format!("{} radii given; at least 3 needed", radii.len())));
    }
    if radii.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("radii must be strictly decreasing".into()));
    }
    let geom = field.geometry();
    let vol = geom.cell_volume();
    let mut values = Vec::with_capacity(radii.len());
    let mut integrals = Vec::with_capacity(radii.len());
    for &r in radii {
        let nodes = ball_nodes(field, &Ball::new(center.to_vec(), r))?;
        let v = oscillation_on(field, &nodes, p);
        values.push(v);
        integrals.push(v * nodes.len() as f64 * vol);
    }
    let degenerate = integrals.iter().any(|v| !(*v > 0.0));
    let fit = if degenerate {
        DecayFit { slope: f64::NAN, constant: f64::NAN, residual: f64::NAN, points: radii.len(), degenerate }
    } else {
        let x: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
        let y: Vec<f64> = integrals.iter().map(|v| v.ln()).collect();
        let (slope, icept, residual) = least_squares(&x, &y);
        DecayFit { slope, constant: icept.exp(), residual, points: radii.len(), degenerate }
    };
    Ok((OscillationCurve { center: center.to_vec(), radii: radii.to_vec(), values, integrals, p }, fit))
}

/// One reverse-Hölder doubling constant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GehringEntry {
    pub center: Vec<usize>,
    pub scale: f64,
    /// `None` when the denominator vanishes.
    pub constant: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GehringReport {
    pub pbar: f64,
    pub entries: Vec<GehringEntry>,
    /// Largest finite constant.
    pub max_constant: Option<f64>,
}

/// `C(x₀, s) = (⨍_{B_s} |f|²)^{1/2} / (⨍_{B_2s} |f|^{p̄})^{1/p̄}`, `p̄ = 2n/(n+2)`.
pub fn reverse_holder_check(field: &SymMatField, centers: &[Vec<usize>], scales: &[f64]) -> Result<GehringReport> {
    let pbar = gehring_exponent(field.dim());
    let jobs: Vec<(Vec<usize>, f64)> =
        centers.iter().flat_map(|c| scales.iter().map(move |&s| (c.clone(), s))).collect();
    let entries: Vec<Result<GehringEntry>> = par::map_slice(&jobs, |(c, s)| {
        let small = ball_nodes(field, &Ball::new(c.clone(), *s))?;
        let big = ball_nodes(field, &Ball::new(c.clone(), 2.0 * s))?;
        let num = mean_power(field, &small, 2.0).sqrt();
        let den = mean_power(field, &big, pbar).powf(1.0 / pbar);
        let constant = (den > 0.0).then(|| num / den);
        Ok(GehringEntry { center: c.clone(), scale: *s, constant })
    });
    let entries: Vec<GehringEntry> = entries.into_iter().collect::<Result<_>>()?;
    let max_constant = entries.iter().filter_map(|e| e.constant).fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))));
    Ok(GehringReport { pbar, entries, max_constant })
}

/// Outcome of the higher-integrability scan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct P0Estimate {
    /// Largest `p` such that every scanned exponent up to it is certified.
    pub p0: Option<f64>,
    pub scan: Vec<f64>,
    /// Smallest constant `K(p)` valid across all radius pairs.
    pub k_needed: Vec<f64>,
    pub k_max: f64,
}

/// Scans `p` and certifies `(⨍_{B_ρ}|f|^p)^{1/p} ≤ K (⨍_{B_r}|f|²)^{1/2}` on
/// the pairs `(ρ, r)` with `ρ = r` or `ρ` the next smaller radius.
pub fn fit_p0(field: &SymMatField, center: &[usize], radii: &[f64], scan: &[f64], k_max: f64) -> Result<P0Estimate> {
    if radii.len() < 3 {
        return Err(Error::InvalidArgument(format!("{} radii given; at least 3 needed", radii.len())));
    }
    if radii.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("radii must be strictly decreasing".into()));
    }
    if scan.is_empty() {
        return Err(Error::InvalidArgument("empty exponent scan".into()));
    }
    let balls: Vec<Vec<usize>> =
        radii.iter().map(|&r| ball_nodes(field, &Ball::new(center.to_vec(), r))).collect::<Result<_>>()?;
    let l2: Vec<f64> = balls.iter().map(|b| mean_power(field, b, 2.0).sqrt()).collect();
    let k_needed: Vec<f64> = par::map_slice(scan, |&p| {
        let lp: Vec<f64> = balls.iter().map(|b| mean_power(field, b, p).powf(1.0 / p)).collect();
        let mut k: f64 = 0.0;
        for i in 0..radii.len() {
            let mut pairs = vec![(i, i)];
            if i + 1 < radii.len() {
                pairs.push((i + 1, i));
            }
            for (a, b) in pairs {
                let ratio = if l2[b] > 0.0 {
                    lp[a] / l2[b]
                } else if lp[a] == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                };
                k = k.max(ratio);
            }
        }
        k
    });
    let mut p0 = None;
    for (&p, &k) in scan.iter().zip(&k_needed) {
        if k <= k_max {
            p0 = Some(p);
        } else {
            break;
        }
    }
    Ok(P0Estimate { p0, scan: scan.to_vec(), k_needed, k_max })
}

/// Mask values.
pub const MASK_REGULAR: u8 = 0;
pub const MASK_SINGULAR: u8 = 1;
pub const MASK_UNDEFINED: u8 = 255;

/// Largest `|f(x) − mean f|` over the field region.
pub fn oscillation_spread(field: &SymMatField) -> f64 {
    let nodes: Vec<usize> = (0..field.data().len()).filter(|&i| field.region()[i]).collect();
    if nodes.is_empty() {
        return 0.0;
    }
    deviations(field, &nodes).iter().map(|d| d.norm()).fold(0.0, f64::max)
}

/// Volume of the unit ball in `n` dimensions.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => unreachable!("dimensions above three are not supported"),
    }
}

/// Threshold `rel · |B₁| · spread^{p₀}`: a node is singular when its mean
/// `p₀`-oscillation exceeds `rel · spread^{p₀}` on both radii.
pub fn default_tau(field: &SymMatField, p0: f64, rel: f64) -> f64 {
    rel * unit_ball_volume(field.dim()) * oscillation_spread(field).powf(p0)
}

/// Discrete singular set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingularMask {
    /// Per node: 0 regular, 1 singular, 255 undefined.
    #[serde(skip)]
    pub mask: Vec<u8>,
    pub p0: f64,
    pub radii: Vec<f64>,
    pub tau: f64,
    pub singular_count: usize,
    pub defined_count: usize,
    /// Upper box-counting dimension of the singular nodes.
    pub box_dim: Option<f64>,
}

/// Marks `x` singular when `min_{r ∈ last two radii} r^{−n} ∫_{B_r(x)} |f − (f)_r|^{p₀} > τ`.
/// Nodes where the larger of the two balls does not fit are undefined.
pub fn singular_set(field: &SymMatField, p0: f64, radii: &[f64], tau: f64) -> Result<SingularMask> {
    check_p(p0)?;
    let geom = field.geometry();
    if radii.len() < 2 {
        return Err(Error::InvalidArgument("at least two radii needed".into()));
    }
    if radii.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("radii must be strictly decreasing".into()));
    }
    let smallest = radii[radii.len() - 1];
    if smallest < 3.0 * geom.h() * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "smallest radius {smallest} is below three grid spacings ({})",
            3.0 * geom.h()
        )));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {tau} must be nonnegative")));
    }
    let last = [radii[radii.len() - 2], smallest];
    let n = geom.dim();
    let vol = geom.cell_volume();
    let mask: Vec<u8> = par::map_range(geom.len(), |i| {
        let c = geom.coords(i)[..n].to_vec();
        let mut q = f64::INFINITY;
        for &r in &last {
            match ball_nodes(field, &Ball::new(c.clone(), r)) {
                Ok(nodes) => {
                    let integral = oscillation_on(field, &nodes, p0) * nodes.len() as f64 * vol;
                    q = q.min(integral / r.powi(n as i32));
                }
                Err(_) => return MASK_UNDEFINED,
            }
        }
        if q > tau {
            MASK_SINGULAR
        } else {
            MASK_REGULAR
        }
    });
    let singular_count = mask.iter().filter(|&&m| m == MASK_SINGULAR).count();
    let defined_count = mask.iter().filter(|&&m| m != MASK_UNDEFINED).count();
    let box_dim = box_counting_dimension(geom, &mask);
    Ok(SingularMask { mask, p0, radii: radii.to_vec(), tau, singular_count, defined_count, box_dim })
}

/// Slope of `log N(b)` against `log(1/b)` over box sizes `b = 2, 4, …` nodes
/// up to a quarter of the axis; `None` when fewer than two sizes are usable.
pub fn box_counting_dimension(geom: &GridGeometry, mask: &[u8]) -> Option<f64> {
    let n = geom.dim();
    let nodes = geom.nodes_per_axis();
    let marked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == MASK_SINGULAR).collect();
    if marked.is_empty() {
        return None;
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut b = 2;
    while 4 * b <= nodes {
        let mut boxes: Vec<usize> = marked
            .iter()
            .map(|&i| {
                let c = geom.coords(i);
                let per = nodes.div_ceil(b);
                (0..n).fold(0, |acc, a| acc * per + c[a] / b)
            })
            .collect();
        boxes.sort_unstable();
        boxes.dedup();
        xs.push(-((b as f64) * geom.h()).ln());
        ys.push((boxes.len() as f64).ln());
        b *= 2;
    }
    if xs.len() < 2 {
        return None;
    }
    Some(least_squares(&xs, &ys).0)
}

/// Hölder seminorm estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HolderEstimate {
    pub alpha: f64,
    pub seminorm: f64,
    /// Node coordinates of the attaining pair.
    pub pair: (Vec<usize>, Vec<usize>),
    pub pairs_evaluated: usize,
    pub seed: u64,
}

/// `max |f(x) − f(y)| / |x − y|^α` over sampled pairs in the concentric
/// region `|x| ≤ ¾·half_width`.
///
/// Anchors: one seeded node per cell of a fixed physical lattice sized from
/// `pair_budget`, plus the extreme region nodes along each axis; all anchor
/// pairs are evaluated. Every pair of axis neighbors in the region is added.
pub fn holder_seminorm(field: &SymMatField, alpha: f64, pair_budget: usize, seed: u64) -> Result<HolderEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must lie in (0, 1)")));
    }
    let geom = field.geometry();
    let n = geom.dim();
    let rad = 0.75 * geom.half_width();
    let in_region = |i: usize| {
        let x = geom.position(i);
        field.region()[i] && (0..n).map(|a| x[a] * x[a]).sum::<f64>() <= rad * rad * (1.0 + 1e-12)
    };
    let region: Vec<usize> = (0..geom.len()).filter(|&i| in_region(i)).collect();
    if region.len() < 2 {
        return Err(Error::EmptyRegion("Hölder region has fewer than two nodes".into()));
    }

    let target = ((2 * pair_budget.max(1)) as f64).sqrt();
    let cells = (target.powf(1.0 / n as f64).floor() as usize).max(2);
    let cell = 2.0 * rad / cells as f64;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells.pow(n as u32)];
    for &i in &region {
        let x = geom.position(i);
        let key = (0..n).fold(0, |acc, a| {
            let k = (((x[a] + rad) / cell).floor() as isize).clamp(0, cells as isize - 1) as usize;
            acc * cells + k
        });
        buckets[key].push(i);
    }
    let mut anchors: Vec<usize> = Vec::new();
    for (k, b) in buckets.iter().enumerate() {
        if !b.is_empty() {
            let mut rng = sample_rng(seed, k);
            anchors.push(b[rng.random_range(0..b.len())]);
        }
    }
    for a in 0..n {
        for sign in [-1.0, 1.0] {
            let best = region
                .iter()
                .copied()
                .max_by(|&i, &j| {
                    let (xi, xj) = (geom.position(i)[a] * sign, geom.position(j)[a] * sign);
                    xi.partial_cmp(&xj).unwrap().then(j.cmp(&i))
                })
                .expect("region is nonempty");
            anchors.push(best);
        }
    }
    anchors.sort_unstable();
    anchors.dedup();

    let ratio = |i: usize, j: usize| -> f64 {
        let (x, y) = (geom.position(i), geom.position(j));
        let d = (0..n).map(|a| (x[a] - y[a]).powi(2)).sum::<f64>().sqrt();
        (*field.at(i) - *field.at(j)).norm() / d.powf(alpha)
    };
    let far: Vec<(f64, usize, usize)> = par::map_range(anchors.len(), |p| {
        let i = anchors[p];
        let mut best = (0.0, i, i);
        for &j in &anchors[p + 1..] {
            let r = ratio(i, j);
            if r > best.0 {
                best = (r, i, j);
            }
        }
        best
    });
    let near: Vec<(f64, usize, usize, usize)> = par::map_slice(&region, |&i| {
        let mut best = (0.0, i, i, 0);
        for a in 0..n {
            let mut off = [0isize; MAX_DIM];
            off[a] = 1;
            if let Some(j) = geom.offset(i, &off[..n]) {
                if in_region(j) {
                    best.3 += 1;
                    let r = ratio(i, j);
                    if r > best.0 {
                        best = (r, i, j, best.3);
                    }
                }
            }
        }
        best
    });
    let mut best = (0.0, region[0], region[0]);
    for &(r, i, j) in &far {
        if r > best.0 {
            best = (r, i, j);
        }
    }
    let mut near_pairs = 0;
    for &(r, i, j, c) in &near {
        near_pairs += c;
        if r > best.0 {
            best = (r, i, j);
        }
    }
    let m = anchors.len();
    Ok(HolderEstimate {
        alpha,
        seminorm: best.0,
        pair: (geom.coords(best.1)[..n].to_vec(), geom.coords(best.2)[..n].to_vec()),
        pairs_evaluated: m * (m - 1) / 2 + near_pairs,
        seed,
    })
}

/// Parameters of the iteration lemma
/// `φ(τ) ≤ A[(τ/r)^κ + ε]φ(r) + B r^β ⇒ φ(τ) ≤ c[(τ/r)^γ φ(r) + B τ^β]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationParams {
    pub a: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub b: f64,
    pub beta: f64,
    /// Threshold `ε₀` on the extracted `ε`.
    pub eps0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationVerdict {
    /// `θ = (2A)^{−2/κ}`.
    pub theta: f64,
    /// Smallest `ε` making the hypothesis hold on all pairs with `τ ≤ θr`.
    pub eps_min: f64,
    pub eps_ok: bool,
    /// Smallest `c` making the conclusion hold on all pairs with `τ ≤ r`.
    pub c: f64,
    pub hypothesis_pairs: usize,
}

/// Checks the iteration lemma on samples `(radius, φ)`.
pub fn iteration_lemma_check(samples: &[(f64, f64)], params: &IterationParams) -> Result<IterationVerdict> {
    let IterationParams { a, kappa, gamma, b, beta, eps0 } = *params;
    if !(kappa > gamma && gamma > beta && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("need κ > γ > β ≥ 0, got κ = {kappa}, γ = {gamma}, β = {beta}")));
    }
    if !(a > 0.0) || !(b >= 0.0) {
        return Err(Error::InvalidArgument("A must be positive and B nonnegative".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite radii"));
    if s.iter().any(|&(r, v)| !(r > 0.0) || !(v >= 0.0)) {
        return Err(Error::InvalidArgument("samples need positive radii and nonnegative values".into()));
    }
    if s.windows(2).any(|w| w[1].1 < w[0].1) {
        return Err(Error::InvalidArgument("φ is not nondecreasing in the radius".into()));
    }
    let theta = (2.0 * a).powf(-2.0 / kappa);
    let mut eps_min: f64 = 0.0;
    let mut hyp = 0;
    let mut c: f64 = 0.0;
    for (i, &(tau, pt)) in s.iter().enumerate() {
        for &(r, pr) in &s[i..] {
            let q = tau / r;
            if tau <= theta * r * (1.0 + 1e-12) {
                hyp += 1;
                let need = if pr > 0.0 { (pt - b * r.powf(beta)) / (a * pr) - q.powf(kappa) } else { 0.0 };
                eps_min = eps_min.max(need);
            }
            let rhs = q.powf(gamma) * pr + b * tau.powf(beta);
            if rhs > 0.0 {
                c = c.max(pt / rhs);
            } else if pt > 0.0 {
                c = f64::INFINITY;
            }
        }
    }
    if hyp == 0 {
        return Err(Error::InvalidArgument(format!("no sample pair with τ ≤ θr (θ = {theta})")));
    }
    Ok(IterationVerdict { theta, eps_min, eps_ok: eps_min < eps0, c, hypothesis_pairs: hyp })
}

/// Balls of `family` lying inside `|x| ≤ fraction · half_width`.
pub fn inner_family(geom: &GridGeometry, family: &BallFamily, fraction: f64) -> Result<BallFamily> {
    let lim = fraction * geom.half_width();
    let balls: Vec<Ball> = family
        .balls
        .iter()
        .filter(|b| {
            let c = b.center_position(geom);
            c.iter().map(|x| x * x).sum::<f64>().sqrt() + b.radius <= lim * (1.0 + 1e-12)
        })
        .cloned()
        .collect();
    if balls.is_empty() {
        return Err(Error::BallFamily(format!("no ball fits inside radius {lim}")));
    }
    Ok(BallFamily { balls, ..family.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ball_family, hessian_field, make_grid, ScalarGrid};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn geom(n: usize, nodes: usize, hw: f64) -> GridGeometry {
        make_grid(n, nodes, hw).unwrap().geometry().clone()
    }

    fn mat_a() -> SymMat {
        SymMat::from_packed(2, &[1.0, 0.5, -2.0])
    }

    #[test]
    fn mean_oscillation_examples() {
        let g = geom(2, 101, 1.0);
        let c = SymMatField::constant(g.clone(), mat_a());
        let ball = Ball::at_point(&g, &[0.0, 0.0], 0.3);
        for p in [1.0, 2.0, 3.5] {
            assert_eq!(mean_oscillation(&c, &ball, p).unwrap(), 0.0);
        }
        // Mean |x₁| over a disk of radius ρ is 4ρ/(3π).
        let a = mat_a();
        let lin = SymMatField::sample(g.clone(), |x| a.scale(x[0]));
        for rho in [0.25, 0.4] {
            assert!(rho / g.h() >= 12.0);
            let got = mean_oscillation(&lin, &Ball::at_point(&g, &[0.0, 0.0], rho), 1.0).unwrap();
            let want = a.norm() * rho * 4.0 / (3.0 * PI);
            assert_relative_eq!(got, want, max_relative = 0.03);
        }
        // Two-valued field split by a diameter not through nodes.
        let split = SymMatField::sample(g.clone(), |x| if x[0] > 0.005 { a } else { -a });
        let got = mean_oscillation(&split, &Ball::at_point(&g, &[0.0, 0.0], 0.4), 1.0).unwrap();
        assert_relative_eq!(got, a.norm(), max_relative = 4.0 * g.h() / 0.4);

        assert!(mean_oscillation(&c, &Ball::at_point(&g, &[0.0, 0.0], 0.99), 1.0).is_err());
        assert!(mean_oscillation(&c, &ball, 0.5).is_err());
    }

    #[test]
    fn power_mean_monotone() {
        let g = geom(2, 41, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<SymMat> = (0..g.len()).map(|_| SymMat::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let f = SymMatField::new(g.clone(), vals, vec![true; g.len()]).unwrap();
        let b = Ball::at_point(&g, &[0.1, -0.2], 0.4);
        let m: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&p| mean_oscillation(&f, &b, p).unwrap().powf(1.0 / p)).collect();
        assert!(m[0] <= m[1] && m[1] <= m[2]);
    }

    #[test]
    fn bmo_examples_and_invariances() {
        let g = geom(2, 65, 1.0);
        let fam = ball_family(&g, Some(8), 0.125, 0.5).unwrap();
        let c = SymMatField::constant(g.clone(), mat_a());
        assert_eq!(bmo_modulus(&c, &fam).unwrap().omega, 0.0);

        let a = mat_a();
        let lin = SymMatField::sample(g.clone(), |x| a.scale(x[0] + 0.5 * x[1]));
        let est = bmo_modulus(&lin, &fam).unwrap();
        assert_eq!(est.ball.radius, 0.5);
        for (b, v) in fam.balls.iter().zip(&est.per_ball) {
            assert!(*v <= est.omega);
            if b.radius == 0.25 {
                assert_relative_eq!(*v * 2.0, est.omega, max_relative = 0.05);
            }
        }
        let sub = BallFamily { balls: fam.balls[..fam.len() / 2].to_vec(), ..fam.clone() };
        assert!(bmo_modulus(&lin, &sub).unwrap().omega <= est.omega);

        // Dyadic data make shifts and doublings exact.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<SymMat> = (0..g.len())
            .map(|_| SymMat::from_fn(2, |_, _| rng.random_range(-64i32..64) as f64 / 8.0))
            .collect();
        let f = SymMatField::new(g.clone(), vals, vec![true; g.len()]).unwrap();
        let shift = SymMat::from_packed(2, &[3.0, -1.0, 5.0]);
        let w = bmo_modulus(&f, &fam).unwrap().omega;
        assert_eq!(bmo_modulus(&f.map(|m| *m + shift), &fam).unwrap().omega, w);
        assert_eq!(bmo_modulus(&f.map(|m| m.scale(2.0)), &fam).unwrap().omega, 2.0 * w);
    }

    #[test]
    fn john_nirenberg_examples() {
        let g = geom(2, 65, 1.0);
        let fam = ball_family(&g, Some(8), 0.125, 0.5).unwrap();
        let c = SymMatField::constant(g.clone(), mat_a());
        assert!(john_nirenberg_ratio(&c, &fam, 2.0).unwrap().degenerate);
        let a = mat_a();
        let lin = |g: &GridGeometry| SymMatField::sample(g.clone(), move |x| a.scale(x[0] - 0.3 * x[1]));
        assert_relative_eq!(john_nirenberg_ratio(&lin(&g), &fam, 1.0).unwrap().cbar.unwrap(), 1.0, epsilon = 1e-15);
        let coarse = john_nirenberg_ratio(&lin(&g), &fam, 2.0).unwrap().cbar.unwrap();
        let g2 = geom(2, 129, 1.0);
        let fam2 = ball_family(&g2, Some(16), 0.125, 0.5).unwrap();
        let fine = john_nirenberg_ratio(&lin(&g2), &fam2, 2.0).unwrap().cbar.unwrap();
        assert!(coarse.is_finite() && (fine / coarse - 1.0).abs() <= 0.1);
    }

    #[test]
    fn campanato_examples() {
        let g = geom(2, 129, 1.0);
        let center = g.coords(g.center_index())[..2].to_vec();
        let radii = [0.5, 0.25, 0.125, 0.0625];
        let c = SymMatField::constant(g.clone(), mat_a());
        let (curve, fit) = campanato_decay(&c, &center, &radii, 2.0).unwrap();
        assert!(curve.values.iter().all(|v| *v == 0.0) && fit.degenerate);
        let a = mat_a();
        let lin = SymMatField::sample(g.clone(), |x| a.scale(x[0] + 2.0 * x[1]));
        for p in [1.0, 2.0, 3.0] {
            let (_, fit) = campanato_decay(&lin, &center, &radii, p).unwrap();
            assert!((fit.slope - (2.0 + p)).abs() < 0.1, "p = {p}: {}", fit.slope);
        }
        let shifted = lin.map(|m| *m + SymMat::from_packed(2, &[7.0, 1.0, -3.0]));
        let (c1, _) = campanato_decay(&lin, &center, &radii, 2.0).unwrap();
        let (c2, _) = campanato_decay(&shifted, &center, &radii, 2.0).unwrap();
        for (x, y) in c1.values.iter().zip(&c2.values) {
            assert_relative_eq!(x, y, max_relative = 1e-10);
        }
        assert!(campanato_decay(&lin, &center, &radii[..2], 2.0).is_err());
    }

    #[test]
    fn reverse_holder_examples() {
        assert_eq!(gehring_exponent(2), 1.0);
        assert_relative_eq!(gehring_exponent(3), 1.2);
        let g = geom(2, 65, 1.0);
        let c = SymMatField::constant(g.clone(), mat_a());
        let center = g.coords(g.center_index())[..2].to_vec();
        let rep = reverse_holder_check(&c, &[center.clone()], &[0.1, 0.2]).unwrap();
        for e in &rep.entries {
            assert_relative_eq!(e.constant.unwrap(), 1.0, epsilon = 1e-14);
        }
        let z = SymMatField::constant(g.clone(), SymMat::zeros(2));
        assert_eq!(reverse_holder_check(&z, &[center.clone()], &[0.1]).unwrap().entries[0].constant, None);
        assert!(reverse_holder_check(&c, &[center], &[0.6]).is_err());
    }

    #[test]
    fn p0_examples() {
        let g = geom(2, 129, 1.0);
        let center = g.coords(g.center_index())[..2].to_vec();
        let radii = [0.5, 0.25, 0.125, 0.0625];
        let scan = default_p0_scan();
        let c = SymMatField::constant(g.clone(), mat_a());
        let est = fit_p0(&c, &center, &radii, &scan, DEFAULT_K_MAX).unwrap();
        assert_eq!(est.p0, Some(4.0));

        // Bounded field: K(p) never exceeds sup|f| / (mean |f|²)^{1/2} on the
        // smallest ball.
        let b = SymMatField::sample(g.clone(), |x| SymMat::from_diag(&[1.0 + x[0] * x[0], 0.5]));
        let est = fit_p0(&b, &center, &radii, &scan, DEFAULT_K_MAX).unwrap();
        let sup = b.data().iter().map(|m| m.norm()).fold(0.0, f64::max);
        let small = Ball::new(center.clone(), 0.0625).nodes(&g);
        let l2 = mean_power(&b, &small, 2.0).sqrt();
        assert!(est.k_needed.iter().all(|k| *k <= sup / l2 + 1e-12));

        // Spike |x − x_s|^{−2/5}, x_s off the nodes: in L^q for q < 5 only.
        let spike = |g: &GridGeometry| {
            let s = 0.5 * g.h();
            SymMatField::sample(g.clone(), move |x| {
                let r = ((x[0] - s).powi(2) + (x[1] - s).powi(2)).sqrt();
                SymMat::from_diag(&[r.powf(-0.4), 0.0])
            })
        };
        let scan_wide = [2.5, 3.0, 4.0, 6.0];
        let k_at = |nodes: usize| {
            let g = geom(2, nodes, 1.0);
            let c = g.coords(g.center_index())[..2].to_vec();
            fit_p0(&spike(&g), &c, &radii, &scan_wide, DEFAULT_K_MAX).unwrap()
        };
        let (coarse, fine) = (k_at(129), k_at(257));
        assert!(fine.p0.unwrap() >= 3.0);
        // Closed form: (⨍_{B_ρ}|x|^{−2p/5})^{1/p} / (⨍_{B_2ρ}|x|^{−4/5})^{1/2}.
        let cf = |p: f64| (1.0 / (1.0 - p / 5.0)).powf(1.0 / p) / (1.0f64 / 0.6).sqrt() * 2f64.powf(0.4);
        assert_relative_eq!(fine.k_needed[1], cf(3.0), max_relative = 0.1);
        // L⁶ mass near the spike grows like h^{−2/5}, so K(6) grows by about 2^{1/15} per refinement.
        assert!(fine.k_needed[3] / coarse.k_needed[3] > 1.03);
        assert!((fine.k_needed[1] / coarse.k_needed[1] - 1.0).abs() < 0.05);
    }

    #[test]
    fn singular_set_examples() {
        let g = geom(2, 97, 1.0);
        let h = g.h();
        let radii = [6.0 * h, 3.0 * h];
        // Quadratic potential: constant Hessian, empty mask.
        let u = ScalarGrid::sample(g.clone(), |x| x[0] * x[0] - 0.3 * x[0] * x[1]);
        let hf = hessian_field(&u);
        let m = singular_set(&hf, 2.5, &radii, 1e-6).unwrap();
        assert_eq!(m.singular_count, 0);
        assert!(m.defined_count > 0);

        let a = mat_a();
        let jump = SymMatField::sample(g.clone(), |x| if x[0] >= 0.0 { a } else { -a });
        let p0 = 2.5;
        let tau = 0.5 * a.norm().powf(p0) * PI;
        let m = singular_set(&jump, p0, &radii, tau).unwrap();
        let (mut near, mut near_hit, mut far, mut far_hit) = (0, 0, 0, 0);
        for i in 0..g.len() {
            if m.mask[i] == MASK_UNDEFINED {
                continue;
            }
            let d = g.position(i)[0].abs();
            if d <= h * (1.0 + 1e-9) {
                near += 1;
                near_hit += (m.mask[i] == MASK_SINGULAR) as usize;
            } else if d > 4.0 * h {
                far += 1;
                far_hit += (m.mask[i] == MASK_SINGULAR) as usize;
            }
        }
        assert!(near_hit as f64 >= 0.9 * near as f64);
        assert!(far_hit as f64 <= 0.05 * far as f64);
        assert!((m.box_dim.unwrap() - 1.0).abs() < 0.3, "{:?}", m.box_dim);

        let shifted = jump.map(|x| *x + SymMat::from_packed(2, &[1.0, 2.0, 3.0]));
        assert_eq!(singular_set(&shifted, p0, &radii, tau).unwrap().mask, m.mask);
        let scaled = jump.map(|x| x.scale(2.0));
        assert_eq!(singular_set(&scaled, p0, &radii, tau * 2f64.powf(p0)).unwrap().mask, m.mask);
        assert!(singular_set(&jump, p0, &[6.0 * h, 2.0 * h], tau).is_err());
    }

    #[test]
    fn holder_examples() {
        let g = geom(2, 33, 1.0);
        let c = SymMatField::constant(g.clone(), mat_a());
        assert_eq!(holder_seminorm(&c, 0.5, 2000, 1).unwrap().seminorm, 0.0);
        let a = mat_a();
        let dir = [0.6, 0.8];
        let lin = SymMatField::sample(g.clone(), |x| a.scale(dir[0] * x[0] + dir[1] * x[1]));
        let est = holder_seminorm(&lin, 0.5, 2000, 1).unwrap();
        // Exhaustive oracle over all region pairs.
        let rad = 0.75;
        let region: Vec<usize> = (0..g.len())
            .filter(|&i| {
                let x = g.position(i);
                x[0] * x[0] + x[1] * x[1] <= rad * rad * (1.0 + 1e-12)
            })
            .collect();
        let mut best: f64 = 0.0;
        for (k, &i) in region.iter().enumerate() {
            for &j in &region[k + 1..] {
                let (x, y) = (g.position(i), g.position(j));
                let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
                best = best.max((*lin.at(i) - *lin.at(j)).norm() / d.sqrt());
            }
        }
        assert_relative_eq!(best, a.norm() * (2.0 * rad).sqrt(), max_relative = 0.03);
        assert!(est.seminorm <= best + 1e-12 && est.seminorm >= 0.9 * best, "{} vs {best}", est.seminorm);
        let again = holder_seminorm(&lin, 0.5, 2000, 1).unwrap();
        assert_eq!(again, est);

        let wide = geom(2, 33, 2.0);
        let lin2 = SymMatField::sample(wide.clone(), |x| a.scale(x[0] + x[1]));
        let mut prev = f64::INFINITY;
        for alpha in [0.2, 0.5, 0.8] {
            let s = holder_seminorm(&lin2, alpha, 2000, 3).unwrap().seminorm;
            assert!(s <= prev);
            prev = s;
        }
        assert!(holder_seminorm(&c, 1.0, 10, 1).is_err());
    }

    #[test]
    fn iteration_lemma_examples() {
        let kappa = 4.0;
        let samples: Vec<(f64, f64)> = (0..8).map(|k| {
            let r = 0.5f64.powi(k);
            (r, r.powf(kappa))
        }).collect();
        let params = IterationParams { a: 1.0, kappa, gamma: 2.0, b: 0.0, beta: 0.0, eps0: 1e-3 };
        let v = iteration_lemma_check(&samples, &params).unwrap();
        assert_relative_eq!(v.theta, 2f64.powf(-0.5));
        assert!(v.eps_min.abs() < 1e-12 && v.eps_ok);
        assert_relative_eq!(v.c, 1.0, epsilon = 1e-12);

        let flat: Vec<(f64, f64)> = (0..6).map(|k| (0.5f64.powi(k), 1.0)).collect();
        let v = iteration_lemma_check(&flat, &IterationParams { a: 0.5, ..params.clone() }).unwrap();
        assert!(!v.eps_ok && v.eps_min > 1.0);

        let bad: Vec<(f64, f64)> = vec![(1.0, 1.0), (0.5, 2.0), (0.25, 0.1)];
        assert!(iteration_lemma_check(&bad, &params).is_err());
        assert!(iteration_lemma_check(&samples, &IterationParams { gamma: 5.0, ..params }).is_err());
    }
}
