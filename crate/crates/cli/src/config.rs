//! Run configuration: TOML grammar, defaults and validation.
//!
//! ```toml
//! lambda_star = 6          # integer >= 1
//! output_dir = "out"
//! seed = 0
//!
//! [scenario]
//! name = "pinch3d"
//! params = { eps = 0.05 }
//!
//! [grid]
//! dim = 3                  # defaults to the scenario's first dimension
//! lo = -1.0
//! hi = 1.0
//! cells = [32, 64]         # strictly increasing
//!
//! [solver]
//! tol = 1e-10
//! relax = 1.9              # omitted: 2 / (1 + sin(pi / n))
//! ordering = "red-black"   # or "lexicographic"
//! check_every = 10
//!
//! [analysis]
//! radii = [0.2, 0.1, 0.05] # strictly decreasing
//! points = [[0.5, 0.0, 0.0]]
//! auto_points = 16         # free-boundary points sampled when `points` is absent
//! x0 = [0.0, 0.0, 0.0]     # omitted: singular point nearest the box center
//! delta = 0.5              # enables cross sections, nu and the diameter profile
//! slices = [[0.3], [0.4]]  # omitted: every layer of I_delta
//! min_section_cells = 8.0
//! eps_u = 1e-6
//! svg = false
//! dump_mask = false
//!
//! [analysis.acf]
//! radii = [0.05, 0.1, 0.2]
//! direction = [0.0, 1.0, 0.0]
//! center = [0.5, 0.0, 0.0]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use obstacle_core::scenarios::{catalog, ScenarioError};
use obstacle_core::solver::{Ordering, SolveOptions};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_lambda_star")]
    pub lambda_star: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relax: Option<f64>,
    #[serde(default = "default_ordering")]
    pub ordering: Ordering,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default = "default_check_every")]
    pub check_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: default_tol(),
            relax: None,
            ordering: default_ordering(),
            max_iter: None,
            check_every: default_check_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_auto_points")]
    pub auto_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_min_section_cells")]
    pub min_section_cells: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_u: Option<f64>,
    #[serde(default)]
    pub svg: bool,
    #[serde(default)]
    pub dump_mask: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acf: Option<AcfConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            radii: default_radii(),
            points: None,
            auto_points: default_auto_points(),
            x0: None,
            delta: None,
            slices: None,
            min_section_cells: default_min_section_cells(),
            eps_u: None,
            svg: false,
            dump_mask: false,
            acf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcfConfig {
    pub radii: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
}

fn default_lambda_star() -> u32 {
    6
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_lo() -> f64 {
    -1.0
}
fn default_hi() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-10
}
fn default_ordering() -> Ordering {
    Ordering::RedBlack
}
fn default_check_every() -> usize {
    10
}
fn default_radii() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}
fn default_auto_points() -> usize {
    16
}
fn default_min_section_cells() -> f64 {
    8.0
}

/// Invalid configuration, located by field path and (when found) line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}, field `{}`: {}", self.field, self.msg),
            None => write!(f, "field `{}`: {}", self.field, self.msg),
        }
    }
}

/// 1-based line of `key` inside `[section]` (top level when `section` is empty).
fn locate(text: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", field),
    };
    let key = key.split('[').next().unwrap_or(key);
    let mut current = String::new();
    let mut header_line = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = h.trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        let lhs = t.split('=').next().unwrap_or("").trim();
        if current == section && lhs == key {
            return Some(i + 1);
        }
        // dotted or inline keys such as `params = { eps = 0.1 }`
        if current.is_empty() || section.starts_with(&current) {
            let full = if current.is_empty() { lhs.to_string() } else { format!("{current}.{lhs}") };
            if full == section && t.contains(key) {
                return Some(i + 1);
            }
        }
    }
    header_line
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            ConfigError {
                field: "<document>".into(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate().map_err(|(field, msg)| ConfigError {
            line: locate(text, &field),
            field,
            msg,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Spatial dimension: explicit, else the scenario's first catalog dimension.
    pub fn dim(&self) -> usize {
        self.grid.dim.unwrap_or_else(|| {
            catalog()
                .into_iter()
                .find(|e| e.name == self.scenario.name)
                .map(|e| e.dims[0])
                .unwrap_or(2)
        })
    }

    pub fn solve_options(&self, relax: f64) -> SolveOptions {
        SolveOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            relax: self.solver.relax.unwrap_or(relax),
            ordering: self.solver.ordering,
            check_every: self.solver.check_every,
        }
    }

    fn validate(&self) -> Result<(), (String, String)> {
        let err = |f: &str, m: String| Err((f.to_string(), m));
        if self.lambda_star < 1 {
            return err("lambda_star", format!("must be >= 1, got {}", self.lambda_star));
        }
        let Some(entry) = catalog().into_iter().find(|e| e.name == self.scenario.name) else {
            let names: Vec<&str> = catalog().iter().map(|e| e.name).collect();
            return err("scenario.name", format!("unknown scenario `{}`; known: {}", self.scenario.name, names.join(", ")));
        };
        for key in self.scenario.params.keys() {
            if !entry.params.iter().any(|p| p.name == key) {
                let known: Vec<&str> = entry.params.iter().map(|p| p.name).collect();
                return err(
                    &format!("scenario.params.{key}"),
                    format!("unknown parameter for {}; known: {}", entry.name, known.join(", ")),
                );
            }
        }
        let dim = self.dim();
        if !entry.dims.contains(&dim) {
            return err("grid.dim", format!("{} supports dimensions {:?}, got {dim}", entry.name, entry.dims));
        }
        if !(self.grid.lo < self.grid.hi) || !self.grid.lo.is_finite() || !self.grid.hi.is_finite() {
            return err("grid.lo", format!("need finite lo < hi, got [{}, {}]", self.grid.lo, self.grid.hi));
        }
        if self.grid.cells.is_empty() {
            return err("grid.cells", "must list at least one size".into());
        }
        if self.grid.cells.windows(2).any(|w| w[1] <= w[0]) {
            return err("grid.cells", format!("must be strictly increasing, got {:?}", self.grid.cells));
        }
        if self.grid.cells[0] < 4 {
            return err("grid.cells", format!("need at least 4 cells per axis, got {}", self.grid.cells[0]));
        }
        let s = &self.solver;
        if let Err(e) = self.solve_options(1.5).validate() {
            let field = if !(s.tol > 0.0) {
                "solver.tol"
            } else if s.relax.is_some_and(|r| !(r > 0.0 && r < 2.0)) {
                "solver.relax"
            } else if s.check_every == 0 {
                "solver.check_every"
            } else {
                "solver.max_iter"
            };
            return err(field, e.to_string());
        }
        let a = &self.analysis;
        if a.radii.is_empty() || a.radii.iter().any(|r| !(*r > 0.0)) || a.radii.windows(2).any(|w| w[1] >= w[0]) {
            return err("analysis.radii", format!("must be non-empty, positive and strictly decreasing, got {:?}", a.radii));
        }
        let side = self.grid.hi - self.grid.lo;
        if let Some(d) = a.delta {
            if !(d > 0.0) {
                return err("analysis.delta", format!("delta (δ) must be positive, got {d}"));
            }
            if d > side {
                return err("analysis.delta", format!("delta (δ) = {d} exceeds the box side {side}"));
            }
        }
        let point_ok = |p: &Vec<f64>| p.len() == dim && p.iter().all(|v| v.is_finite());
        if let Some(points) = &a.points {
            if points.is_empty() {
                return err("analysis.points", "must be non-empty when given".into());
            }
            if let Some(p) = points.iter().find(|p| !point_ok(p)) {
                return err("analysis.points", format!("point {p:?} must have {dim} finite coordinates"));
            }
        } else if a.auto_points == 0 {
            return err("analysis.auto_points", "must be positive when `points` is absent".into());
        }
        if let Some(x0) = &a.x0 {
            if !point_ok(x0) {
                return err("analysis.x0", format!("must have {dim} finite coordinates, got {x0:?}"));
            }
        }
        if let Some(sl) = &a.slices {
            if sl.is_empty() {
                return err("analysis.slices", "must be non-empty when given".into());
            }
            if a.delta.is_none() {
                return err("analysis.slices", "slices need `delta`".into());
            }
        }
        if !(a.min_section_cells >= 0.0) {
            return err("analysis.min_section_cells", format!("must be >= 0, got {}", a.min_section_cells));
        }
        if let Some(e) = a.eps_u {
            if !(e > 0.0) {
                return err("analysis.eps_u", format!("must be positive, got {e}"));
            }
        }
        if let Some(acf) = &a.acf {
            if acf.radii.len() < 2 || acf.radii.iter().any(|r| !(*r > 0.0)) || acf.radii.windows(2).any(|w| w[1] <= w[0]) {
                return err("analysis.acf.radii", format!("need at least two positive increasing radii, got {:?}", acf.radii));
            }
            if let Some(d) = &acf.direction {
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if d.len() != dim || !(norm > 0.0) {
                    return err("analysis.acf.direction", format!("need a nonzero {dim}-vector, got {d:?}"));
                }
            }
            if let Some(c) = &acf.center {
                if !point_ok(c) {
                    return err("analysis.acf.center", format!("must have {dim} finite coordinates, got {c:?}"));
                }
            }
        }
        Ok(())
    }
}

/// Field path for a parameter error raised while building the scenario.
pub fn scenario_error_field(e: &ScenarioError) -> String {
    match e {
        ScenarioError::Param { param, .. } | ScenarioError::UnknownParam { param, .. } => format!("scenario.params.{param}"),
        ScenarioError::Dimension { .. } => "grid.dim".into(),
        ScenarioError::Unknown(_) => "scenario.name".into(),
        _ => "grid".into(),
    }
}
