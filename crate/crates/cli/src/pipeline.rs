//! Solve and analysis pipelines shared by `run` and `analyze`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use obstacle_core::analysis::{
    acf_monotonicity, classify_point, kernel_frame, kernel_is_axis_aligned, locate_free_boundary_point,
    reference_ellipsoid, resample_in_frame, write_acf_csv, write_residual_table_csv, BlowupPolynomial, Verdict,
};
use obstacle_core::geometry::{
    axis_split, coincidence_mask, cross_section, cross_section_convergence, default_eps_u, diameter_asymptotics,
    double_prime, free_boundary, nu_direction, osc_nu, slice_index_set, slice_svg, write_cross_sections_csv,
    Ellipsoid,
};
use obstacle_core::grid::{GridSpec, Mask, ScalarField};
use obstacle_core::scenarios::{make_scenario, Scenario};
use obstacle_core::snapshot::{read_snapshot, write_snapshot, SnapshotError};
use obstacle_core::solver::{optimal_relax, solve_psor, write_telemetry_csv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{scenario_error_field, ConfigError, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Input(String),
    Io(PathBuf, io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "invalid config: {e}"),
            CliError::Input(m) => write!(f, "invalid input: {m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

/// Exit status of a completed pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    NotConverged = 2,
    Degenerate = 3,
}

/// A CSV assembled across grids; every row is prefixed with its context.
#[derive(Default)]
struct Table {
    header: Option<String>,
    rows: Vec<String>,
}

impl Table {
    fn push(&mut self, ctx_header: &str, ctx: &str, lib_csv: &[u8]) {
        let text = String::from_utf8_lossy(lib_csv);
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        if self.header.is_none() {
            self.header = Some(format!("{ctx_header},{head}"));
        }
        self.rows.extend(lines.map(|l| format!("{ctx},{l}")));
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let Some(h) = &self.header else { return Ok(()) };
        let mut s = String::with_capacity(h.len() + self.rows.iter().map(|r| r.len() + 1).sum::<usize>());
        s.push_str(h);
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        write_file(path, s.as_bytes())
    }
}

#[derive(Default)]
struct Tables {
    telemetry: Table,
    classification: Table,
    acf: Table,
    sections: Table,
    profile: Table,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn fmt_point(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Context columns `cells,h,scenario,<params…>` for rows produced on `grid`.
struct RowContext {
    header: String,
    values: String,
}

impl RowContext {
    fn new(grid: &GridSpec, s: &Scenario) -> Self {
        let mut header = String::from("cells,h,scenario");
        let mut values = format!("{},{},{}", grid.cells()[0], grid.h_max(), s.name);
        for (k, v) in &s.params {
            header.push(',');
            header.push_str(k);
            values.push(',');
            values.push_str(&v.to_string());
        }
        RowContext { header, values }
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

/// What the analysis phase works on.
pub enum Input<'a> {
    Field(&'a ScalarField),
    Geometry(&'a Mask),
}

struct GridAnalysis {
    report: Value,
    /// Diagnostic failures; any entry makes the run exit 3.
    failures: Vec<String>,
}

fn verdict_name(v: &Verdict) -> &'static str {
    match v {
        Verdict::Regular(_) => "regular",
        Verdict::Singular(_) => "singular",
        Verdict::Undetermined => "undetermined",
    }
}

fn coefficient_at(s: &Scenario, x: &[f64]) -> f64 {
    s.problem
        .as_ref()
        .map(|p| p.coefficient().interpolate(x).unwrap_or(p.c0()))
        .unwrap_or(1.0)
}

fn classification_points(cfg: &RunConfig, s: &Scenario, u: &ScalarField, mask: &Mask) -> Vec<Vec<f64>> {
    if let Some(p) = &cfg.analysis.points {
        return p.clone();
    }
    let faces = free_boundary(mask);
    let chosen: Vec<Vec<f64>> = if faces.len() > cfg.analysis.auto_points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = rand::seq::index::sample(&mut rng, faces.len(), cfg.analysis.auto_points).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| faces[i].clone()).collect()
    } else {
        faces
    };
    chosen
        .into_iter()
        .map(|f| locate_free_boundary_point(u, &f, coefficient_at(s, &f)).unwrap_or(f))
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `FᵀAF` restricted to the leading `k` frame axes.
fn rotated_leading_block(a: &DMatrix<f64>, frame: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let full = frame.transpose() * a * frame;
    full.view((0, 0), (k, k)).into_owned()
}

/// Resolved kernel and blow-up for the cross-section phase.
struct Anchor {
    poly: Option<BlowupPolynomial>,
    source: &'static str,
    kernel: Vec<Vec<f64>>,
}

fn anchor(s: &Scenario, u: Option<&ScalarField>, x0: &[f64], radii: &[f64], report: &mut Value) -> Anchor {
    if let Some(u) = u {
        match classify_point(u, coefficient_at(s, x0), x0, radii) {
            Ok(c) => {
                report["x0_classification"] = serde_json::to_value(&c).unwrap_or(Value::Null);
                if let Verdict::Singular(p) = c.verdict {
                    let kernel = p.kernel_basis.clone();
                    return Anchor {
                        poly: Some(p),
                        source: "fit",
                        kernel,
                    };
                }
            }
            Err(e) => report["x0_classification"] = json!({ "error": e.to_string() }),
        }
    }
    if let Some(rows) = &s.truth.blowup {
        let d = rows.len();
        let a = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        if let Ok(p) = BlowupPolynomial::from_matrix(&a, a.trace(), 1e-9) {
            let kernel = p.kernel_basis.clone();
            return Anchor {
                poly: Some(p),
                source: "scenario",
                kernel,
            };
        }
    }
    Anchor {
        poly: None,
        source: "scenario",
        kernel: s.truth.kernel_basis.clone(),
    }
}

struct Outputs<'a> {
    tables: &'a mut Tables,
    dir: &'a Path,
}

fn analyze_grid(cfg: &RunConfig, s: &Scenario, grid: &GridSpec, input: Input<'_>, out: &mut Outputs<'_>) -> Result<GridAnalysis, CliError> {
    let a = &cfg.analysis;
    let dim = grid.dim();
    let cells = grid.cells()[0];
    let ctx = RowContext::new(grid, s);
    let mut failures = Vec::new();
    let mut report = json!({});
    let c_max = s.problem.as_ref().map_or(1.0, |p| p.coefficient().max_abs());
    let eps_u = a.eps_u.unwrap_or_else(|| default_eps_u(grid, cfg.solver.tol, c_max));
    let (u, mask) = match input {
        Input::Field(u) => (Some(u), coincidence_mask(u, eps_u)),
        Input::Geometry(m) => (None, m.clone()),
    };
    report["eps_u"] = json!(eps_u);
    report["coincidence_cells"] = json!(mask.count());
    report["coincidence_measure"] = json!(mask.measure());
    if a.dump_mask {
        let f = mask.to_field().map_err(|e| CliError::Input(e.to_string()))?;
        let path = out.dir.join(format!("mask_{cells}.txt"));
        let mut buf = Vec::new();
        write_snapshot(&f, &mut buf).expect("writing to memory");
        write_file(&path, &buf)?;
    }

    // classification
    let mut singular = Vec::new();
    if let Some(u) = u {
        let points = classification_points(cfg, s, u, &mask);
        let mut rows = Vec::new();
        let h = format!("{},point,{},verdict", ctx.header, (1..=dim).map(|k| format!("x{k}")).collect::<Vec<_>>().join(","));
        for (k, p) in points.iter().enumerate() {
            match classify_point(u, coefficient_at(s, p), p, &a.radii) {
                Ok(c) => {
                    let vals = format!("{},{k},{},{}", ctx.values, fmt_point(p), verdict_name(&c.verdict));
                    out.tables
                        .classification
                        .push(&h, &vals, &csv_bytes(|w| write_residual_table_csv(&c.residual_table, w)));
                    if c.is_singular() {
                        singular.push(p.clone());
                    }
                    rows.push(serde_json::to_value(&c).unwrap_or(Value::Null));
                }
                Err(e) => {
                    failures.push(format!("classification at {p:?}: {e}"));
                    rows.push(json!({ "x0": p, "error": e.to_string() }));
                }
            }
        }
        report["classification"] = Value::Array(rows);
    }

    // x0: override, else the singular point nearest the box center
    let center: Vec<f64> = (0..dim).map(|k| grid.origin()[k] + 0.5 * grid.extent()[k]).collect();
    let x0 = a.x0.clone().or_else(|| {
        if u.is_none() {
            return Some(vec![0.0; dim]);
        }
        singular
            .iter()
            .min_by(|p, q| squared_distance(p, &center).total_cmp(&squared_distance(q, &center)))
            .cloned()
    });
    report["x0"] = json!(x0);

    let anchor = x0.as_ref().map(|x0| anchor(s, u, x0, &a.radii, &mut report));
    if let Some(anchor) = &anchor {
        report["kernel_basis"] = json!(anchor.kernel);
        report["kernel_source"] = json!(anchor.source);
        report["blowup"] = serde_json::to_value(&anchor.poly).unwrap_or(Value::Null);
    }
    let kernel_dim = anchor.as_ref().map(|an| an.kernel.len());
    if let Some(delta) = a.delta {
        match (&x0, &anchor) {
            (Some(x0), Some(anchor)) if !anchor.kernel.is_empty() => {
                sections(cfg, s, grid, delta, x0, anchor, u, &mask, &ctx, &mut report, &mut failures, out)?
            }
            (Some(_), _) => failures.push("blow-up kernel is trivial (n = 0); cross sections need n >= 1".into()),
            _ => failures.push("cross sections requested but no singular point was found; set analysis.x0".into()),
        }
    }
    report["applicability"] = applicability(dim, kernel_dim, cfg.lambda_star);

    if let (Some(acf), Some(u)) = (&a.acf, u) {
        let mut e = acf.direction.clone().unwrap_or_else(|| {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        });
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        e.iter_mut().for_each(|v| *v /= norm);
        let y = acf.center.clone().or_else(|| x0.clone()).unwrap_or(center.clone());
        match acf_monotonicity(&u.directional_derivative(&e), &y, &acf.radii) {
            Ok(rep) => {
                let h = format!("{},e,y", ctx.header);
                let vals = format!("{},{},{}", ctx.values, fmt_point(&e).replace(',', " "), fmt_point(&y).replace(',', " "));
                out.tables.acf.push(&h, &vals, &csv_bytes(|w| write_acf_csv(&rep.rows, w)));
                report["acf"] = json!({ "direction": e, "center": y, "report": rep });
            }
            Err(err) => {
                failures.push(format!("ACF at {y:?}: {err}"));
                report["acf"] = json!({ "error": err.to_string() });
            }
        }
    }
    Ok(GridAnalysis { report, failures })
}

#[allow(clippy::too_many_arguments)]
fn sections(
    cfg: &RunConfig,
    s: &Scenario,
    grid: &GridSpec,
    delta: f64,
    x0: &[f64],
    anchor: &Anchor,
    u: Option<&ScalarField>,
    mask: &Mask,
    ctx: &RowContext,
    report: &mut Value,
    failures: &mut Vec<String>,
    out: &mut Outputs<'_>,
) -> Result<(), CliError> {
    let a = &cfg.analysis;
    let dim = grid.dim();
    let n = anchor.kernel.len();
    let m = dim - n;
    let cells = grid.cells()[0];
    // frame: axis-aligned kernels work in place, others resample u
    let aligned = kernel_is_axis_aligned(dim, &anchor.kernel);
    let (mask, x0, kernel, frame) = if aligned {
        (mask.clone(), x0.to_vec(), anchor.kernel.clone(), None)
    } else {
        let Some(u) = u else {
            failures.push("non-axis-aligned kernel on a geometry-only scenario".into());
            return Ok(());
        };
        let frame = kernel_frame(dim, &anchor.kernel);
        match resample_in_frame(u, &frame, x0) {
            Ok(v) => {
                let c_max = s.problem.as_ref().map_or(1.0, |p| p.coefficient().max_abs());
                let eps = a.eps_u.unwrap_or_else(|| default_eps_u(v.grid(), cfg.solver.tol, c_max));
                let kernel = (m..dim)
                    .map(|k| {
                        let mut e = vec![0.0; dim];
                        e[k] = 1.0;
                        e
                    })
                    .collect();
                (coincidence_mask(&v, eps), vec![0.0; dim], kernel, Some(frame))
            }
            Err(e) => {
                failures.push(format!("frame resampling: {e}"));
                return Ok(());
            }
        }
    };
    report["frame_resampled"] = json!(frame.is_some());
    let split = match axis_split(dim, &kernel) {
        Ok(sp) => sp,
        Err(e) => {
            failures.push(format!("kernel split: {e}"));
            return Ok(());
        }
    };

    let eprime = match &anchor.poly {
        Some(p) => {
            let pprime = match &frame {
                None => p.restrict(&split.prime),
                Some(f) => BlowupPolynomial::from_matrix(&rotated_leading_block(&p.matrix(), f, m), p.trace_target, p.tau_eig),
            };
            let refgrid = GridSpec::cube(m, cfg.grid.lo, cfg.grid.hi, cells).map_err(|e| CliError::Input(e.to_string()))?;
            let opts = cfg.solve_options(optimal_relax(&refgrid));
            match pprime.and_then(|pp| reference_ellipsoid(&pp, &refgrid, &opts, None)) {
                Ok(r) => {
                    report["reference_ellipsoid"] = serde_json::to_value(&r).unwrap_or(Value::Null);
                    Some(r.normalized)
                }
                Err(e) => {
                    failures.push(format!("reference ellipsoid: {e}"));
                    report["reference_ellipsoid"] = json!({ "error": e.to_string() });
                    None
                }
            }
        }
        None => {
            let b = Ellipsoid::ball(vec![0.0; m], 0.5).expect("valid ball");
            report["reference_ellipsoid"] = json!({ "normalized": b, "source": "ball" });
            Some(b)
        }
    };

    let g = mask.grid().clone();
    let slices = match &a.slices {
        Some(sl) => sl.clone(),
        None => match slice_index_set(&mask, &x0, delta, &kernel) {
            Ok(all) => {
                let min_d = a.min_section_cells * g.h_max();
                all.into_iter()
                    .filter(|sx| {
                        cross_section(&mask, sx, &x0, delta, &kernel)
                            .map(|cs| cs.diameter() >= min_d)
                            .unwrap_or(false)
                    })
                    .collect()
            }
            Err(e) => {
                failures.push(format!("slice index set: {e}"));
                Vec::new()
            }
        },
    };
    if let Some(eprime) = &eprime {
        match cross_section_convergence(&mask, &x0, delta, eprime, &slices, &kernel) {
            Ok(reps) => {
                out.tables
                    .sections
                    .push(&ctx.header, &ctx.values, &csv_bytes(|w| write_cross_sections_csv(&reps, n, m, w)));
                if a.svg && m == 2 {
                    for (k, rep) in reps.iter().enumerate() {
                        let Ok(cs) = cross_section(&mask, &rep.xpp, &x0, delta, &kernel) else { continue };
                        if let Ok(svg) = slice_svg(&cs.mask, rep.fitted.as_ref()) {
                            write_file(&out.dir.join(format!("section_{cells}_{k:03}.svg")), svg.as_bytes())?;
                        }
                    }
                }
                report["cross_sections"] = serde_json::to_value(&reps).unwrap_or(Value::Null);
            }
            Err(e) => failures.push(format!("cross sections: {e}")),
        }
    }

    match (nu_direction(&mask, &x0, delta, &kernel), osc_nu(&mask, &x0, delta, &kernel)) {
        (Ok(nu), Ok(osc)) => report["nu"] = json!({ "nu": nu, "oscillation": osc }),
        (Err(e), _) | (_, Err(e)) => {
            failures.push(format!("nu direction: {e}"));
            report["nu"] = json!({ "error": e.to_string() });
        }
    }

    if n == 1 {
        let axis = split.kernel[0];
        let sign = split.signs[0];
        let x0pp = double_prime(&x0, &kernel)[0];
        let samples: Vec<(f64, f64)> = (0..g.cells()[axis])
            .map(|l| sign * (g.origin()[axis] + (l as f64 + 0.5) * g.spacing(axis)))
            .filter(|t| (t - x0pp).abs() <= delta)
            .filter_map(|t| cross_section(&mask, &[t], &x0, delta, &kernel).ok())
            .map(|cs| (cs.xpp[0], cs.diameter()))
            .collect();
        let mut sorted = samples.clone();
        sorted.sort_by(|p, q| p.0.total_cmp(&q.0));
        let lines: String = sorted.iter().map(|(t, d)| format!("{t},{d}\n")).collect();
        out.tables
            .profile
            .push(&ctx.header, &ctx.values, format!("t,d\n{lines}").as_bytes());
        match diameter_asymptotics(&sorted, g.cell_diagonal()) {
            Ok(p) => report["diameter_profile"] = serde_json::to_value(&p).unwrap_or(Value::Null),
            Err(e) => {
                failures.push(format!("diameter profile: {e}"));
                report["diameter_profile"] = json!({ "error": e.to_string() });
            }
        }
    }
    Ok(())
}

/// Main-theorem hypothesis `n >= 1 and N - n + 1 >= Λ*` under both readings.
fn applicability(dim: usize, n: Option<usize>, lambda_star: u32) -> Value {
    let reading = |l: u32| match n {
        Some(n) => {
            let lhs = dim as i64 - n as i64 + 1;
            json!({ "lambda_star": l, "lhs": lhs, "holds": n >= 1 && lhs >= l as i64 })
        }
        None => json!({ "lambda_star": l, "lhs": Value::Null, "holds": Value::Null }),
    };
    json!({
        "N": dim,
        "n": n,
        "configured": reading(lambda_star),
        "conjectured": reading(1),
    })
}

fn grid_for(cfg: &RunConfig, cells: usize) -> Result<GridSpec, CliError> {
    GridSpec::cube(cfg.dim(), cfg.grid.lo, cfg.grid.hi, cells).map_err(|e| {
        CliError::Config(ConfigError {
            field: "grid.cells".into(),
            line: None,
            msg: e.to_string(),
        })
    })
}

fn scenario_for(cfg: &RunConfig, grid: &GridSpec) -> Result<Scenario, CliError> {
    make_scenario(&cfg.scenario.name, &cfg.scenario.params, grid).map_err(|e| {
        CliError::Config(ConfigError {
            field: scenario_error_field(&e),
            line: None,
            msg: e.to_string(),
        })
    })
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(dir.clone(), e))?;
    Ok(dir)
}

fn finish(cfg: &RunConfig, mode: &str, dir: &Path, tables: &Tables, grids: Vec<Value>, status: Status, started: Instant) -> Result<Status, CliError> {
    tables.telemetry.write(&dir.join("telemetry.csv"))?;
    tables.classification.write(&dir.join("classification.csv"))?;
    tables.acf.write(&dir.join("acf.csv"))?;
    tables.sections.write(&dir.join("cross_sections.csv"))?;
    tables.profile.write(&dir.join("diameter_profile.csv"))?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "mode": mode,
        "config": cfg,
        "grids": grids,
        "exit_code": status as i32,
        "tool": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
        "timing": { "elapsed_seconds": started.elapsed().as_secs_f64() },
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&dir.join("report.json"), text.as_bytes())?;
    Ok(status)
}

fn combine(status: Status, nonconverged: bool, failures: bool) -> Status {
    if nonconverged || status == Status::NotConverged {
        Status::NotConverged
    } else if failures || status == Status::Degenerate {
        Status::Degenerate
    } else {
        Status::Ok
    }
}

pub fn run(cfg: &RunConfig) -> Result<Status, CliError> {
    let started = Instant::now();
    let dir = prepare_dir(cfg)?;
    let mut tables = Tables::default();
    let mut grids = Vec::new();
    let mut status = Status::Ok;
    for &cells in &cfg.grid.cells {
        let grid = grid_for(cfg, cells)?;
        let s = scenario_for(cfg, &grid)?;
        let mut entry = json!({ "cells": cells, "h": grid.h_max() });
        let mut nonconverged = false;
        let analysis = if let Some(problem) = &s.problem {
            let opts = cfg.solve_options(optimal_relax(&grid));
            let t = Instant::now();
            let sol = solve_psor(problem, &opts).map_err(|e| CliError::Input(e.to_string()))?;
            let secs = t.elapsed().as_secs_f64();
            nonconverged = !sol.converged;
            let ctx = RowContext::new(&grid, &s);
            tables
                .telemetry
                .push(&ctx.header, &ctx.values, &csv_bytes(|w| write_telemetry_csv(&sol.history, w)));
            let mut buf = Vec::new();
            write_snapshot(&sol.u, &mut buf).expect("writing to memory");
            write_file(&dir.join(format!("u_{cells}.txt")), &buf)?;
            let exact_error = s.exact_field(&grid).and_then(|f| f.ok()).and_then(|f| f.max_diff(&sol.u).ok());
            entry["solver"] = json!({
                "options": opts,
                "iterations": sol.iterations,
                "converged": sol.converged,
                "residual": sol.residual,
                "seconds": secs,
                "max_error_vs_exact": exact_error,
            });
            let mut out = Outputs { tables: &mut tables, dir: &dir };
            analyze_grid(cfg, &s, &grid, Input::Field(&sol.u), &mut out)?
        } else {
            let m = s.geometry.as_ref().expect("geometry-only scenario carries a mask");
            entry["solver"] = Value::Null;
            let mut out = Outputs { tables: &mut tables, dir: &dir };
            analyze_grid(cfg, &s, &grid, Input::Geometry(m), &mut out)?
        };
        entry["analysis"] = analysis.report;
        entry["failures"] = json!(analysis.failures);
        status = combine(status, nonconverged, !analysis.failures.is_empty());
        grids.push(entry);
    }
    finish(cfg, "run", &dir, &tables, grids, status, started)
}

pub fn analyze(snapshot: &Path, cfg: &RunConfig) -> Result<Status, CliError> {
    let started = Instant::now();
    let u = read_snapshot(snapshot).map_err(|e| match e {
        SnapshotError::Malformed { offset, msg } => {
            CliError::Input(format!("{}: malformed snapshot at byte offset {offset}: {msg}", snapshot.display()))
        }
        SnapshotError::Io(e) => CliError::Io(snapshot.to_path_buf(), e),
    })?;
    let g = u.grid().clone();
    let dim = cfg.dim();
    let cells = g.cells()[0];
    let consistent = g.dim() == dim
        && cfg.grid.cells.contains(&cells)
        && (0..dim).all(|k| {
            g.cells()[k] == cells
                && (g.origin()[k] - cfg.grid.lo).abs() <= 1e-12
                && (g.upper(k) - cfg.grid.hi).abs() <= 1e-12
        });
    if !consistent {
        return Err(CliError::Input(format!(
            "snapshot grid (dim {}, cells {:?}, origin {:?}) does not match the config grid (dim {dim}, cells {:?}, box [{}, {}])",
            g.dim(),
            &g.cells()[..g.dim()],
            &g.origin()[..g.dim()],
            cfg.grid.cells,
            cfg.grid.lo,
            cfg.grid.hi
        )));
    }
    let dir = prepare_dir(cfg)?;
    let s = scenario_for(cfg, &g)?;
    let mut tables = Tables::default();
    let mut out = Outputs { tables: &mut tables, dir: &dir };
    let analysis = analyze_grid(cfg, &s, &g, Input::Field(&u), &mut out)?;
    let status = combine(Status::Ok, false, !analysis.failures.is_empty());
    let entry = json!({
        "cells": cells,
        "h": g.h_max(),
        "snapshot": snapshot.display().to_string(),
        "solver": Value::Null,
        "analysis": analysis.report,
        "failures": analysis.failures,
    });
    finish(cfg, "analyze", &dir, &tables, vec![entry], status, started)
}
