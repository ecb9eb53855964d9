//! Command-line driver: `solve`, `diagnose`, `hamstat`, `campanato` and
//! `report-merge`.
//!
//! Exit codes: 0 success, 2 solver hit its iteration cap, 64 usage or
//! configuration error, 65 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::config::{NamedFunction, RunConfig};
use crate::diagnostics::{
    bmo_modulus, campanato_decay, default_tau, fit_p0, holder_seminorm, inner_family, john_nirenberg_ratio, reverse_holder_check,
    singular_set,
};
use crate::error::{Error, Result};
use crate::grid::{ball_family, hessian_field, make_grid, GridGeometry, ScalarGrid, SymMatField, TestFunctionSet};
use crate::hamstat::{
    convexity_certificate, hamstat_residual, induced_metric, lagrangian_phase, phase_harmonicity_residual,
};
use crate::io::{field_to_bytes, mask_to_bytes, read_file, scalar_to_bytes, write_bytes, GridFile};
use crate::report::{
    campanato_csv, envelope, merge, read_report, write_json, BmoSection, CampanatoEntry, DiagnosticsBody,
    GehringSection, HamstatBody, HolderSection, HstatSection, JnSection, SigmaSection, SolveBody,
};
use crate::solver::minimize_clamped_with;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;

pub const DEFAULT_OUT: &str = "hessvar-out";

#[derive(Debug, Parser)]
#[command(name = "hessvar", version, about = "Clamped solvers and regularity diagnostics for Hessian-dependent integrals")]
pub struct Cli {
    /// Run configuration (TOML sections of key = value pairs).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed; overrides `run.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N", env = "HESSVAR_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Minimize the configured energy under clamped boundary data.
    Solve,
    /// Oscillation diagnostics of a potential or Hessian field.
    Diagnose {
        /// Grid file; overrides `diagnostics.field`.
        #[arg(long, value_name = "PATH")]
        field: Option<PathBuf>,
    },
    /// Phase, metric, residuals and the convexity certificate.
    Hamstat,
    /// Campanato decay curves only.
    Campanato {
        #[arg(long, value_name = "PATH")]
        field: Option<PathBuf>,
    },
    /// Combine JSON reports into one file.
    ReportMerge {
        #[arg(required = true, value_name = "REPORT")]
        reports: Vec<PathBuf>,
    },
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::BallFamily(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let threads = cli.threads;
    if threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    with_threads(threads, || match &cli.command {
        Command::ReportMerge { reports } => {
            cmd_report_merge(reports, &cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)))
        }
        cmd => {
            let cfg = resolve_config(cli)?;
            let out = cfg.run.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            match cmd {
                Command::Solve => cmd_solve(&cfg, &out),
                Command::Diagnose { field } => cmd_diagnose(&cfg, field.as_deref(), &out),
                Command::Hamstat => cmd_hamstat(&cfg, &out),
                Command::Campanato { field } => cmd_campanato(&cfg, field.as_deref(), &out),
                Command::ReportMerge { .. } => unreachable!(),
            }
        }
    })
}

#[cfg(feature = "parallel")]
fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<R: Send>(_threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.out = Some(o.clone());
    }
    Ok(cfg)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let geom = cfg.geometry()?;
    let model = cfg.energy_model()?;
    let init = cfg.boundary_potential(&geom)?;
    let bc = crate::solver::ClampedBoundaryData::from_grid(&init)?;
    info!("solving {} on {} nodes per axis", model.name(), geom.nodes_per_axis());
    let (u, rep) = minimize_clamped_with(&model, &bc, &init, &cfg.solve_options())?;
    let solution = out.join("solution.hvgf");
    write_bytes(&solution, &scalar_to_bytes(&u))?;
    let body = SolveBody {
        iterations: rep.iterations,
        grad_norm: rep.grad_norm,
        energy: rep.energy,
        steps: &rep.steps,
        energy_trace: &rep.energy_trace,
        grad_trace: &rep.grad_trace,
        cg_iterations: &rep.cg_iterations,
        grad_tol: rep.grad_tol,
        converged: rep.converged,
        max_iter_reached: rep.max_iter_reached,
        model: model.name().to_string(),
        solution_file: file_name(&solution),
    };
    write_json(&out.join("solve_report.json"), &envelope("solve", cfg, &body)?)?;
    Ok(if rep.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

/// Hessian field of a potential file, or the matrix field itself.
pub fn load_field(path: &Path) -> Result<SymMatField> {
    match read_file(path)? {
        GridFile::Scalar(u) => Ok(hessian_field(&u)),
        GridFile::Field(f) => Ok(f),
        GridFile::Mask(..) => Err(Error::Format(format!("{} holds a mask, not a field", path.display()))),
    }
}

fn field_path<'a>(cfg: &'a RunConfig, arg: Option<&'a Path>) -> Result<&'a Path> {
    arg.or(cfg.diagnostics.field.as_deref())
        .ok_or_else(|| Error::Config("no field given (use --field or diagnostics.field)".into()))
}

fn node_of(geom: &GridGeometry, x: &[f64]) -> Vec<usize> {
    geom.coords(geom.nearest(x))[..geom.dim()].to_vec()
}

/// Full diagnostics pipeline; returns the report body and the mask.
pub fn diagnose_field(cfg: &RunConfig, field: &SymMatField, input: &str) -> Result<(DiagnosticsBody, Vec<u8>, String)> {
    let d = &cfg.diagnostics;
    let geom = field.geometry();
    let h = geom.h();
    let hw = geom.half_width();
    let r_min = d.r_min.unwrap_or((3.0 * h).max(hw / 16.0));
    let r_max = d.r_max.unwrap_or(hw / 4.0).max(r_min);
    let stride = d.center_stride.unwrap_or(((geom.nodes_per_axis() - 1) / 16).max(1));
    let family = inner_family(geom, &ball_family(geom, Some(stride), r_min, r_max)?, d.inner_fraction)?;
    let bmo = bmo_modulus(field, &family)?;
    let jn = john_nirenberg_ratio(field, &family, d.jn_p)?;

    let mut campanato = Vec::new();
    let mut curves = Vec::new();
    for c in &d.campanato_centers {
        for &p in &d.campanato_p {
            let (curve, fit) = campanato_decay(field, &node_of(geom, c), &d.campanato_radii, p)?;
            campanato.push(CampanatoEntry::new(&curve, &fit));
            curves.push(curve);
        }
    }

    let centers: Vec<Vec<usize>> = d.gehring_centers.iter().map(|c| node_of(geom, c)).collect();
    let rh = reverse_holder_check(field, &centers, &d.gehring_scales)?;
    let origin = node_of(geom, &vec![0.0; geom.dim()]);
    let p0 = fit_p0(field, &origin, &d.p0_radii, &d.p0_scan, d.k_max)?;

    let sigma_p0 = d.sigma_p0.or(p0.p0).unwrap_or(d.p0_scan[0]);
    let radii = d.sigma_radii.clone().unwrap_or_else(|| vec![6.0 * h, 3.0 * h]);
    let tau = d.tau.unwrap_or_else(|| default_tau(field, sigma_p0, d.tau_rel));
    let sigma = singular_set(field, sigma_p0, &radii, tau)?;
    let mask_file = "sigma_mask.hvgf".to_string();

    let holder = holder_seminorm(field, d.alpha, d.holder_pairs, cfg.run.seed)?;
    let body = DiagnosticsBody {
        input: input.to_string(),
        bmo: BmoSection::new(&bmo, d.omega_threshold),
        jn: JnSection::from(&jn),
        campanato,
        gehring: GehringSection::new(&rh, &p0),
        sigma: SigmaSection {
            p0: sigma_p0,
            tau,
            radii,
            mask_file: mask_file.clone(),
            box_dim: sigma.box_dim,
            singular_count: sigma.singular_count,
            defined_count: sigma.defined_count,
        },
        holder: HolderSection::from(&holder),
    };
    Ok((body, sigma.mask, campanato_csv(&curves)))
}

pub fn cmd_diagnose(cfg: &RunConfig, field: Option<&Path>, out: &Path) -> Result<i32> {
    let path = field_path(cfg, field)?;
    let f = load_field(path)?;
    info!("diagnosing {}", path.display());
    let (body, mask, csv) = diagnose_field(cfg, &f, &file_name(path))?;
    write_bytes(&out.join(&body.sigma.mask_file), &mask_to_bytes(f.geometry(), &mask))?;
    write_bytes(&out.join("campanato.csv"), csv.as_bytes())?;
    write_json(&out.join("diagnostics_report.json"), &envelope("diagnostics", cfg, &body)?)?;
    Ok(EXIT_OK)
}

pub fn cmd_campanato(cfg: &RunConfig, field: Option<&Path>, out: &Path) -> Result<i32> {
    let path = field_path(cfg, field)?;
    let f = load_field(path)?;
    let d = &cfg.diagnostics;
    let geom = f.geometry();
    let mut entries = Vec::new();
    let mut curves = Vec::new();
    for c in &d.campanato_centers {
        for &p in &d.campanato_p {
            let (curve, fit) = campanato_decay(&f, &node_of(geom, c), &d.campanato_radii, p)?;
            entries.push(CampanatoEntry::new(&curve, &fit));
            curves.push(curve);
        }
    }
    #[derive(serde::Serialize)]
    struct Body {
        input: String,
        campanato: Vec<CampanatoEntry>,
    }
    write_bytes(&out.join("campanato.csv"), campanato_csv(&curves).as_bytes())?;
    let body = Body { input: file_name(path), campanato: entries };
    write_json(&out.join("campanato_report.json"), &envelope("campanato", cfg, &body)?)?;
    Ok(EXIT_OK)
}

fn hamstat_potential(cfg: &RunConfig, geom: &GridGeometry) -> Result<(ScalarGrid, String)> {
    let amp = cfg.hamstat.amplitude.unwrap_or(cfg.boundary.amplitude);
    let named = |f: NamedFunction, geom: &GridGeometry| ScalarGrid::sample(geom.clone(), move |x| amp * f.eval(x));
    match (cfg.hamstat.potential, &cfg.boundary.file) {
        (None, Some(p)) => Ok((cfg.boundary_potential(geom)?, file_name(p))),
        (f, _) => {
            let f = f.unwrap_or(cfg.boundary.function);
            let name = serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            Ok((named(f, geom), name))
        }
    }
}

fn hstat_max(u: &ScalarGrid, scale: f64) -> Result<(f64, Vec<f64>)> {
    let geom = u.geometry();
    let n = geom.dim();
    let hw = geom.half_width();
    let mut centers = vec![vec![0.0; n]];
    for a in 0..n {
        for s in [-0.25, 0.25] {
            let mut c = vec![0.0; n];
            c[a] = s * hw;
            centers.push(c);
        }
    }
    let tests = TestFunctionSet::smooth_bumps(geom, &centers, scale * hw)?;
    let r = hamstat_residual(u, &tests)?;
    let max = r.iter().zip(&tests.tests).map(|(r, t)| r.abs() / t.l1()).fold(0.0, f64::max);
    Ok((max, r))
}

pub fn cmd_hamstat(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let geom = cfg.geometry()?;
    let (u, potential) = hamstat_potential(cfg, &geom)?;
    let hf = hessian_field(&u);
    let phase = lagrangian_phase(&hf)?;
    let metric = induced_metric(&hf);
    write_bytes(&out.join("phase.hvgf"), &scalar_to_bytes(&phase.theta_grid()))?;
    write_bytes(&out.join("metric.hvgf"), &field_to_bytes(&metric.g_field()))?;

    let scale = cfg.hamstat.bump_scale;
    let (fine, residuals) = hstat_max(&u, scale)?;
    let coarse_nodes = (cfg.grid.nodes - 1) / 2 + 1;
    let coarse = if cfg.boundary.file.is_none() || cfg.hamstat.potential.is_some() {
        make_grid(cfg.grid.n, coarse_nodes, cfg.grid.half_width)
            .ok()
            .map(|g| -> Result<f64> {
                let (uc, _) = hamstat_potential(cfg, g.geometry())?;
                Ok(hstat_max(&uc, scale)?.0)
            })
            .transpose()
            .unwrap_or(None)
    } else {
        None
    };
    let floor = 1e-12;
    let order = coarse.filter(|c| *c > floor && fine > floor).map(|c| (c / fine).log2());
    let hstat = HstatSection { max_normalized: fine, residuals, coarse_max_normalized: coarse, order };
    let phase_harmonicity = phase_harmonicity_residual(&u)?;

    let dims = if cfg.hamstat.dims.is_empty() { vec![cfg.grid.n] } else { cfg.hamstat.dims.clone() };
    let mut certificates = Vec::new();
    for &n in &dims {
        let c = convexity_certificate(cfg.hamstat.eta, n, cfg.hamstat.samples, cfg.run.seed)?;
        write_json(&out.join(format!("certificate_n{n}.json")), &envelope("certificate", cfg, &c)?)?;
        certificates.push(c);
    }
    let body = HamstatBody {
        potential,
        phase_sup: phase.sup_norm(),
        phase_file: "phase.hvgf".into(),
        metric_file: "metric.hvgf".into(),
        hstat,
        phase_harmonicity,
        certificates,
    };
    write_json(&out.join("hamstat_report.json"), &envelope("hamstat", cfg, &body)?)?;
    Ok(EXIT_OK)
}

pub fn cmd_report_merge(reports: &[PathBuf], out: &Path) -> Result<i32> {
    let values = reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = reports.iter().map(|p| file_name(p)).collect();
    write_json(&out.join("merged_report.json"), &merge(&names, values))?;
    Ok(EXIT_OK)
}
