//! Versioned JSON reports.
//!
//! Every report is an object with `schema: 1`, a `kind`, the seed and the
//! resolved configuration. Keys are emitted in sorted order and floats in
//! shortest round-trip form, so equal inputs give byte-identical files.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::diagnostics::{BmoEstimate, DecayFit, GehringReport, HolderEstimate, JnEstimate, OscillationCurve, P0Estimate};
use crate::error::{Error, Result};
use crate::grid::Ball;
use crate::hamstat::{ConvexityCertificate, PhaseResidual};

pub const SCHEMA: u64 = 1;

/// `{schema, kind, seed, config, ...body}`. The output directory is left out
/// of the embedded config.
pub fn envelope(kind: &str, config: &RunConfig, body: &impl Serialize) -> Result<Value> {
    let mut cfg = config.clone();
    cfg.run.out = None;
    let mut obj = Map::new();
    obj.insert("schema".into(), SCHEMA.into());
    obj.insert("kind".into(), kind.into());
    obj.insert("seed".into(), config.run.seed.into());
    obj.insert("config".into(), to_value(&cfg)?);
    match to_value(body)? {
        Value::Object(m) => {
            for (k, v) in m {
                obj.insert(k, v);
            }
        }
        other => {
            obj.insert("body".into(), other);
        }
    }
    Ok(Value::Object(obj))
}

fn to_value(x: &impl Serialize) -> Result<Value> {
    serde_json::to_value(x).map_err(|e| Error::Format(format!("cannot serialize report: {e}")))
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("values always serialize");
    s.push('\n');
    s.into_bytes()
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    crate::io::write_bytes(path, &to_bytes(v))
}

/// Parses a report and checks its schema version.
pub fn read_report(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match v.get("schema").and_then(Value::as_u64) {
        Some(SCHEMA) => Ok(v),
        Some(other) => Err(Error::Format(format!("{}: unsupported schema {other}", path.display()))),
        None => Err(Error::Format(format!("{}: missing schema key", path.display()))),
    }
}

/// `{schema, kind: "merged", sources, reports}` in input order.
pub fn merge(sources: &[String], reports: Vec<Value>) -> Value {
    let mut obj = Map::new();
    obj.insert("schema".into(), SCHEMA.into());
    obj.insert("kind".into(), "merged".into());
    obj.insert("sources".into(), Value::Array(sources.iter().map(|s| Value::from(s.as_str())).collect()));
    obj.insert("reports".into(), Value::Array(reports));
    Value::Object(obj)
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveBody<'a> {
    pub iterations: usize,
    pub grad_norm: f64,
    pub energy: f64,
    pub steps: &'a [f64],
    pub energy_trace: &'a [f64],
    pub grad_trace: &'a [f64],
    pub cg_iterations: &'a [usize],
    pub grad_tol: f64,
    pub converged: bool,
    pub max_iter_reached: bool,
    pub model: String,
    pub solution_file: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct BmoSection {
    pub omega: f64,
    pub ball: Ball,
    pub balls: usize,
    pub threshold: f64,
    /// `"small-BMO"` when `omega ≤ threshold`.
    pub regime: String,
}

impl BmoSection {
    pub fn new(est: &BmoEstimate, threshold: f64) -> Self {
        let regime = if est.omega <= threshold { "small-BMO" } else { "above-threshold" };
        BmoSection { omega: est.omega, ball: est.ball.clone(), balls: est.per_ball.len(), threshold, regime: regime.into() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct JnSection {
    pub p: f64,
    pub cbar: Option<f64>,
    pub degenerate: bool,
}

impl From<&JnEstimate> for JnSection {
    fn from(e: &JnEstimate) -> Self {
        JnSection { p: e.p, cbar: e.cbar, degenerate: e.degenerate }
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Clone, Debug, Serialize)]
pub struct CampanatoEntry {
    pub center: Vec<usize>,
    pub p: f64,
    /// `None` for degenerate fits.
    pub slope: Option<f64>,
    pub c: Option<f64>,
    pub residual: Option<f64>,
    pub radii: Vec<f64>,
    pub integrals: Vec<f64>,
}

impl CampanatoEntry {
    pub fn new(curve: &OscillationCurve, fit: &DecayFit) -> Self {
        CampanatoEntry {
            center: curve.center.clone(),
            p: curve.p,
            slope: finite(fit.slope),
            c: finite(fit.constant),
            residual: finite(fit.residual),
            radii: curve.radii.clone(),
            integrals: curve.integrals.clone(),
        }
    }
}

/// Plot-ready rows `curve,center,p,radius,mean_oscillation,integral`.
pub fn campanato_csv(curves: &[OscillationCurve]) -> String {
    let mut s = String::from("curve,center,p,radius,mean_oscillation,integral\n");
    for (k, c) in curves.iter().enumerate() {
        let center = c.center.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        for ((r, v), i) in c.radii.iter().zip(&c.values).zip(&c.integrals) {
            s.push_str(&format!("{k},{center},{},{r:?},{v:?},{i:?}\n", c.p));
        }
    }
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct GehringSection {
    pub pbar: f64,
    pub constants: Vec<Option<f64>>,
    pub max_constant: Option<f64>,
    pub p0: Option<f64>,
    pub k_needed: Vec<f64>,
    pub k_max: f64,
}

impl GehringSection {
    pub fn new(rh: &GehringReport, p0: &P0Estimate) -> Self {
        GehringSection {
            pbar: rh.pbar,
            constants: rh.entries.iter().map(|e| e.constant).collect(),
            max_constant: rh.max_constant,
            p0: p0.p0,
            k_needed: p0.k_needed.iter().map(|k| if k.is_finite() { *k } else { f64::MAX }).collect(),
            k_max: p0.k_max,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SigmaSection {
    pub p0: f64,
    pub tau: f64,
    pub radii: Vec<f64>,
    pub mask_file: String,
    pub box_dim: Option<f64>,
    pub singular_count: usize,
    pub defined_count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderSection {
    pub alpha: f64,
    pub seminorm: f64,
    pub pair: (Vec<usize>, Vec<usize>),
    pub pairs_evaluated: usize,
}

impl From<&HolderEstimate> for HolderSection {
    fn from(e: &HolderEstimate) -> Self {
        HolderSection { alpha: e.alpha, seminorm: e.seminorm, pair: e.pair.clone(), pairs_evaluated: e.pairs_evaluated }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsBody {
    pub input: String,
    pub bmo: BmoSection,
    pub jn: JnSection,
    pub campanato: Vec<CampanatoEntry>,
    pub gehring: GehringSection,
    pub sigma: SigmaSection,
    pub holder: HolderSection,
}

#[derive(Clone, Debug, Serialize)]
pub struct HstatSection {
    /// `max |r(η)| / ‖η‖₁` over the bump tests.
    pub max_normalized: f64,
    pub residuals: Vec<f64>,
    /// Same quantity on the half-resolution grid.
    pub coarse_max_normalized: Option<f64>,
    /// `log₂(coarse / fine)`; `None` at round-off level.
    pub order: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HamstatBody {
    pub potential: String,
    pub phase_sup: f64,
    pub phase_file: String,
    pub metric_file: String,
    pub hstat: HstatSection,
    pub phase_harmonicity: PhaseResidual,
    pub certificates: Vec<ConvexityCertificate>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_and_merge() {
        #[derive(Serialize)]
        struct Body {
            x: f64,
        }
        let cfg = RunConfig::default();
        let v = envelope("test", &cfg, &Body { x: 0.1 }).unwrap();
        assert_eq!(v["schema"], 1);
        assert_eq!(v["x"], 0.1);
        assert_eq!(v["config"]["grid"]["nodes"], 65);
        let a = to_bytes(&v);
        assert_eq!(a, to_bytes(&envelope("test", &cfg, &Body { x: 0.1 }).unwrap()));
        assert!(a.ends_with(b"\n"));
        let m = merge(&["a.json".into()], vec![v]);
        assert_eq!(m["schema"], 1);
        assert_eq!(m["reports"][0]["kind"], "test");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        fs::write(&p, "{\"schema\": 2}").unwrap();
        assert!(read_report(&p).is_err());
        fs::write(&p, "{\"kind\": 1}").unwrap();
        assert!(read_report(&p).is_err());
        write_json(&p, &m).unwrap();
        assert_eq!(read_report(&p).unwrap(), m);
    }
}
