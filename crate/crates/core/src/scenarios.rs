//! Named test problems with known ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridSpec, Mask, ScalarField};
use crate::solver::{ObstacleProblem, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("scenario `{name}` does not support dimension {dim} (allowed: {allowed:?})")]
    Dimension {
        name: String,
        dim: usize,
        allowed: Vec<usize>,
    },
    #[error("scenario `{name}`: unknown parameter `{param}`")]
    UnknownParam { name: String, param: String },
    #[error("scenario `{name}`: parameter `{param}` {msg}")]
    Param {
        name: String,
        param: String,
        msg: String,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub range: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub dims: &'static [usize],
    pub params: Vec<ParamSpec>,
    pub has_exact: bool,
    pub summary: &'static str,
}

fn p(name: &'static str, default: f64, range: &'static str) -> ParamSpec {
    ParamSpec { name, default, range }
}

fn poly_params() -> Vec<ParamSpec> {
    vec![
        p("a11", 0.5, "symmetric PSD, 2·trace = 1"),
        p("a12", 0.0, ""),
        p("a13", 0.0, ""),
        p("a22", 0.0, ""),
        p("a23", 0.0, ""),
        p("a33", 0.0, ""),
    ]
}

pub fn catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            name: "flat1d",
            dims: &[1],
            params: vec![p("beta", 0.125, "0 < beta < 1/2")],
            has_exact: true,
            summary: "1D problem on [-1,1] with u(±1) = beta",
        },
        CatalogEntry {
            name: "radial2d",
            dims: &[2],
            params: vec![p("R", 0.5, "0 < R < distance from origin to the box")],
            has_exact: true,
            summary: "radial solution with coincidence disk of radius R",
        },
        CatalogEntry {
            name: "radial3d",
            dims: &[3],
            params: vec![p("R", 0.5, "0 < R < distance from origin to the box")],
            has_exact: true,
            summary: "radial solution with coincidence ball of radius R",
        },
        CatalogEntry {
            name: "poly",
            dims: &[1, 2, 3],
            params: poly_params(),
            has_exact: true,
            summary: "homogeneous quadratic x·Ax as data and solution",
        },
        CatalogEntry {
            name: "aniso2d",
            dims: &[2],
            params: vec![
                p("alpha", 0.1, "0 < alpha < 1/2, alpha != 1/4"),
                p("shift", f64::NAN, "> 0; default 1/4 of the boundary minimum"),
            ],
            has_exact: false,
            summary: "shifted anisotropic quadratic data, elliptic coincidence set",
        },
        CatalogEntry {
            name: "pinch3d",
            dims: &[3],
            params: vec![p("eps", 0.05, "eps > 0")],
            has_exact: false,
            summary: "data (x1²+x2²)/4 - eps·x3 clamped at 0; coincidence set with a tip",
        },
        CatalogEntry {
            name: "paraboloid_mask",
            dims: &[2, 3],
            params: vec![p("kappa", 1.0, "kappa > 0")],
            has_exact: false,
            summary: "geometry-only mask {|x'|² <= kappa·x_last}",
        },
    ]
}

pub fn catalog_filtered(dim: Option<usize>) -> Vec<CatalogEntry> {
    catalog()
        .into_iter()
        .filter(|e| dim.is_none_or(|d| e.dims.contains(&d)))
        .collect()
}

/// One line per entry: `name dim params has-exact`.
pub fn format_catalog(entries: &[CatalogEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let dims: Vec<String> = e.dims.iter().map(|d| d.to_string()).collect();
        let params: Vec<String> = e
            .params
            .iter()
            .map(|q| {
                if q.default.is_nan() {
                    format!("{}=auto", q.name)
                } else {
                    format!("{}={}", q.name, q.default)
                }
            })
            .collect();
        writeln!(
            s,
            "{} {} {} {}",
            e.name,
            dims.join(","),
            if params.is_empty() { "-".into() } else { params.join(",") },
            e.has_exact
        )
        .unwrap();
    }
    s
}

/// Known structure of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Coincidence {
    Interval { lo: f64, hi: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    /// `{x_last ≥ 0, |x′|² ≤ kappa · x_last}`.
    Paraboloid { kappa: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub coincidence: Option<Coincidence>,
    /// `A` of the expected blow-up (or blow-down) `x·Ax` at the origin.
    pub blowup: Option<Vec<Vec<f64>>>,
    pub kernel_basis: Vec<Vec<f64>>,
}

pub type ExactFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    /// Every parameter with its resolved value.
    pub params: BTreeMap<String, f64>,
    pub problem: Option<ObstacleProblem>,
    pub geometry: Option<Mask>,
    pub truth: GroundTruth,
    exact: Option<ExactFn>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("params", &self.params)
            .field("has_problem", &self.problem.is_some())
            .field("has_geometry", &self.geometry.is_some())
            .field("truth", &self.truth)
            .field("has_exact", &self.exact.is_some())
            .finish()
    }
}

impl Scenario {
    pub fn has_exact(&self) -> bool {
        self.exact.is_some()
    }

    pub fn exact_value(&self, x: &[f64]) -> Option<f64> {
        self.exact.as_ref().map(|f| f(x))
    }

    pub fn exact_field(&self, grid: &GridSpec) -> Option<Result<ScalarField, GridError>> {
        let f = self.exact.clone()?;
        Some(ScalarField::sample(grid, move |x| f(x)))
    }
}

pub fn exact_value(s: &Scenario, x: &[f64]) -> Option<f64> {
    s.exact_value(x)
}

fn resolve(
    entry: &CatalogEntry,
    given: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, ScenarioError> {
    for k in given.keys() {
        if !entry.params.iter().any(|q| q.name == k) {
            return Err(ScenarioError::UnknownParam {
                name: entry.name.into(),
                param: k.clone(),
            });
        }
    }
    let mut out = BTreeMap::new();
    for q in &entry.params {
        let v = given.get(q.name).copied().unwrap_or(q.default);
        if !v.is_finite() && given.contains_key(q.name) {
            return Err(bad(entry.name, q.name, "must be finite"));
        }
        out.insert(q.name.to_string(), v);
    }
    Ok(out)
}

fn bad(name: &str, param: &str, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Param {
        name: name.into(),
        param: param.into(),
        msg: msg.into(),
    }
}

/// `x·Ax`.
pub fn quad(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = a.nrows();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += a[(i, j)] * x[i] * x[j];
        }
    }
    s
}

fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

fn unit(dim: usize, axis: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[axis] = 1.0;
    e
}

/// Distance from the origin to the nearest box face (negative if outside).
fn origin_clearance(grid: &GridSpec) -> f64 {
    (0..grid.dim())
        .map(|a| (-grid.origin()[a]).min(grid.upper(a)))
        .fold(f64::INFINITY, f64::min)
}

/// Default shift for quadratic data: a quarter of the boundary minimum.
pub fn default_shift(grid: &GridSpec, a: &DMatrix<f64>) -> f64 {
    let dim = grid.dim();
    let min = (0..grid.node_count())
        .filter(|&i| grid.is_boundary_node(i))
        .map(|i| quad(a, &grid.node_position(i)[..dim]))
        .fold(f64::INFINITY, f64::min);
    0.25 * min
}

/// Problem with constant `c` and data `max(x·Ax - shift, 0)` on the faces.
pub fn shifted_quadratic_problem(
    grid: &GridSpec,
    a: &DMatrix<f64>,
    c: f64,
    shift: f64,
) -> Result<ObstacleProblem, SolverError> {
    let a = a.clone();
    ObstacleProblem::constant(grid, c, move |x| (quad(&a, x) - shift).max(0.0))
}

/// Symmetric matrix from `a11, a12, ...`, checked for PSD and `2·trace = 1`.
fn poly_matrix(dim: usize, params: &BTreeMap<String, f64>) -> Result<DMatrix<f64>, ScenarioError> {
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..3 {
        for j in i..3 {
            let key = format!("a{}{}", i + 1, j + 1);
            let v = params[&key];
            if i >= dim || j >= dim {
                if v != 0.0 {
                    return Err(bad("poly", &key, format!("refers to an axis beyond dimension {dim}")));
                }
                continue;
            }
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| a[(i, i)]).sum();
    if (2.0 * trace - 1.0).abs() > 1e-9 {
        return Err(bad("poly", "a11", format!("2·trace must equal 1, got {}", 2.0 * trace)));
    }
    let min_eig = SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-12 {
        return Err(bad("poly", "a11", format!("matrix is not PSD (eigenvalue {min_eig:e})")));
    }
    Ok(a)
}

/// Build a catalog scenario on `grid`; missing parameters take their defaults.
pub fn make_scenario(
    name: &str,
    params: &BTreeMap<String, f64>,
    grid: &GridSpec,
) -> Result<Scenario, ScenarioError> {
    let entry = catalog()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| ScenarioError::Unknown(name.into()))?;
    let dim = grid.dim();
    if !entry.dims.contains(&dim) {
        return Err(ScenarioError::Dimension {
            name: name.into(),
            dim,
            allowed: entry.dims.to_vec(),
        });
    }
    let params = resolve(&entry, params)?;
    let mut s = Scenario {
        name: name.into(),
        dim,
        params: params.clone(),
        problem: None,
        geometry: None,
        truth: GroundTruth::default(),
        exact: None,
    };
    match name {
        "flat1d" => {
            let beta = params["beta"];
            if !(beta > 0.0 && beta < 0.5) {
                return Err(bad(name, "beta", format!("must lie in (0, 1/2), got {beta}")));
            }
            if (grid.origin()[0] + 1.0).abs() > 1e-12 || (grid.upper(0) - 1.0).abs() > 1e-12 {
                return Err(bad(name, "beta", "requires the box [-1, 1]"));
            }
            let a = 1.0 - (2.0 * beta).sqrt();
            s.problem = Some(ObstacleProblem::constant(grid, 1.0, move |_| beta)?);
            s.exact = Some(Arc::new(move |x: &[f64]| (x[0].abs() - a).max(0.0).powi(2) / 2.0));
            s.truth.coincidence = Some(Coincidence::Interval { lo: -a, hi: a });
        }
        "radial2d" | "radial3d" => {
            let r = params["R"];
            let clearance = origin_clearance(grid);
            if !(r > 0.0 && r < clearance) {
                return Err(bad(
                    name,
                    "R",
                    format!("must lie in (0, {clearance}) for this box, got {r}"),
                ));
            }
            let f: ExactFn = if dim == 2 {
                Arc::new(move |x: &[f64]| {
                    let rho = x[0].hypot(x[1]);
                    if rho <= r {
                        0.0
                    } else {
                        (rho * rho - r * r) / 4.0 - (r * r / 2.0) * (rho / r).ln()
                    }
                })
            } else {
                Arc::new(move |x: &[f64]| {
                    let rho = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
                    if rho <= r {
                        0.0
                    } else {
                        (rho * rho / 6.0 + r.powi(3) / (3.0 * rho) - r * r / 2.0).max(0.0)
                    }
                })
            };
            let g = f.clone();
            s.problem = Some(ObstacleProblem::constant(grid, 1.0, move |x| g(x))?);
            s.exact = Some(f);
            s.truth.coincidence = Some(Coincidence::Ball {
                center: vec![0.0; dim],
                radius: r,
            });
        }
        "poly" => {
            let a = poly_matrix(dim, &params)?;
            let eig = SymmetricEigen::new(a.clone());
            s.truth.kernel_basis = (0..dim)
                .filter(|&j| eig.eigenvalues[j].abs() <= 1e-12)
                .map(|j| eig.eigenvectors.column(j).iter().copied().collect())
                .collect();
            s.truth.blowup = Some(to_rows(&a));
            let a2 = a.clone();
            s.problem = Some(ObstacleProblem::constant(grid, 1.0, move |x| quad(&a2, x).max(0.0))?);
            s.exact = Some(Arc::new(move |x: &[f64]| quad(&a, x).max(0.0)));
        }
        "aniso2d" => {
            let alpha = params["alpha"];
            if !(alpha > 0.0 && alpha < 0.5) || (alpha - 0.25).abs() < 1e-9 {
                return Err(bad(name, "alpha", format!("must lie in (0, 1/2) and differ from 1/4, got {alpha}")));
            }
            let a = DMatrix::from_row_slice(2, 2, &[alpha, 0.0, 0.0, 0.5 - alpha]);
            let shift = match params["shift"] {
                v if v.is_nan() => default_shift(grid, &a),
                v => v,
            };
            if !(shift > 0.0) {
                return Err(bad(name, "shift", format!("must be positive, got {shift}")));
            }
            s.params.insert("shift".into(), shift);
            s.problem = Some(shifted_quadratic_problem(grid, &a, 1.0, shift)?);
        }
        "pinch3d" => {
            let eps = params["eps"];
            if !(eps > 0.0) {
                return Err(bad(name, "eps", format!("must be positive, got {eps}")));
            }
            s.problem = Some(ObstacleProblem::constant(grid, 1.0, move |x| {
                ((x[0] * x[0] + x[1] * x[1]) / 4.0 - eps * x[2]).max(0.0)
            })?);
            s.truth.blowup = Some(vec![
                vec![0.25, 0.0, 0.0],
                vec![0.0, 0.25, 0.0],
                vec![0.0, 0.0, 0.0],
            ]);
            s.truth.kernel_basis = vec![unit(3, 2)];
        }
        "paraboloid_mask" => {
            let kappa = params["kappa"];
            if !(kappa > 0.0) {
                return Err(bad(name, "kappa", format!("must be positive, got {kappa}")));
            }
            let last = dim - 1;
            s.geometry = Some(Mask::from_predicate(grid, move |c| {
                let r2: f64 = c[..last].iter().map(|v| v * v).sum();
                c[last] >= 0.0 && r2 <= kappa * c[last]
            }));
            s.truth.coincidence = Some(Coincidence::Paraboloid { kappa });
            s.truth.kernel_basis = vec![unit(dim, last)];
        }
        _ => unreachable!("catalog and constructors out of sync"),
    }
    Ok(s)
}
