//! Blow-up analysis: rescalings, competing quadratic and half-space fits,
//! point classification, the ACF functional, balanced rescalings and the
//! reference ellipsoid of a lower-dimensional blow-down.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, coincidence_mask, default_eps_u, fit_ellipsoid, cells_in_ball, Ellipsoid, GeometryError};
use crate::grid::{integrate_ball, unit_ball_volume, GridError, GridSpec, Mask, ScalarField};
use crate::par;
use crate::scenarios::{default_shift, shifted_quadratic_problem};
use crate::solver::{solve_psor, SolveOptions, SolverError};

/// Relative weight below which a mean gradient carries no direction.
pub const DIRECTION_DEGENERACY: f64 = 1e-3;
/// `τ_class = CLASS_FRACTION · RMS(v on B₁)`.
pub const CLASS_FRACTION: f64 = 0.05;
/// Winner must beat the loser by this factor.
pub const CLASS_MARGIN: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("window of radius {r} around x0 = {x0:?} leaves the domain")]
    OutOfDomain { x0: Vec<f64>, r: f64 },
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("radius {r} is below the resolution limit {min} (4h)")]
    Resolution { r: f64, min: f64 },
    #[error("no balanced scale in [{r_lo}, {r_hi}]: measures {m_lo:.4} and {m_hi:.4} do not bracket {target:.4}")]
    NoBalancedScale {
        r_lo: f64,
        r_hi: f64,
        m_lo: f64,
        m_hi: f64,
        target: f64,
    },
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Window `[-2,2]^dim` resolving a radius-`r` rescaling of a grid with spacing `h`.
pub fn window_grid(dim: usize, r: f64, h: f64) -> GridSpec {
    let cells = ((4.0 * r / h).round() as usize).clamp(16, 64);
    let cells = cells + cells % 2;
    GridSpec::cube(dim, -2.0, 2.0, cells).expect("window grid is valid")
}

/// `v(z) = u(x0 + r z) / r²` on the nodes of `out`, by cubic interpolation.
pub fn rescale(u: &ScalarField, x0: &[f64], r: f64, out: &GridSpec) -> Result<ScalarField, AnalysisError> {
    let g = u.grid();
    let dim = g.dim();
    if out.dim() != dim || x0.len() != dim {
        return Err(AnalysisError::Grid(GridError::Mismatch));
    }
    if !(r > 0.0) {
        return Err(AnalysisError::OutOfDomain { x0: x0.to_vec(), r });
    }
    let lo: Vec<f64> = (0..dim).map(|a| x0[a] + r * out.origin()[a]).collect();
    let hi: Vec<f64> = (0..dim).map(|a| x0[a] + r * out.upper(a)).collect();
    if !g.contains(&lo) || !g.contains(&hi) {
        return Err(AnalysisError::OutOfDomain { x0: x0.to_vec(), r });
    }
    let vals = par::map_range(out.node_count(), |i| {
        let z = out.node_position(i);
        let mut x = [0.0; 3];
        for a in 0..dim {
            // clamp rounding at the box faces
            x[a] = (x0[a] + r * z[a]).clamp(g.origin()[a], g.upper(a));
        }
        u.interpolate_cubic(&x[..dim]).map(|v| v / (r * r))
    });
    let vals: Result<Vec<f64>, GridError> = vals.into_iter().collect();
    Ok(ScalarField::from_values(out, vals?)?)
}

fn unit_ball_nodes(v: &ScalarField) -> Vec<usize> {
    let g = v.grid();
    let dim = g.dim();
    (0..g.node_count())
        .filter(|&i| {
            let z = g.node_position(i);
            z[..dim].iter().map(|t| t * t).sum::<f64>() <= 1.0 + 1e-12
        })
        .collect()
}

/// RMS of `v` over the nodes of the unit ball.
pub fn window_rms(v: &ScalarField) -> f64 {
    let nodes = unit_ball_nodes(v);
    let vals = v.values();
    (nodes.iter().map(|&i| vals[i] * vals[i]).sum::<f64>() / nodes.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupPolynomial {
    /// Row-major symmetric `dim × dim`.
    pub a: Vec<Vec<f64>>,
    pub trace_target: f64,
    /// Eigenvalues ascending.
    pub eigenvalues: Vec<f64>,
    pub n: usize,
    /// Smallest eigenvalue above `tau_eig` (0 when none).
    pub c_p: f64,
    pub kernel_basis: Vec<Vec<f64>>,
    pub tau_eig: f64,
}

fn sign_normalized(v: Vec<f64>) -> Vec<f64> {
    let big = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .expect("non-empty vector");
    if big < 0.0 {
        v.into_iter().map(|x| -x).collect()
    } else {
        v
    }
}

impl BlowupPolynomial {
    /// Eigen-decompose `a`; eigenvalues in `[-tau_eig, 0)` are clamped to 0.
    pub fn from_matrix(a: &DMatrix<f64>, trace_target: f64, tau_eig: f64) -> Result<Self, AnalysisError> {
        let dim = a.nrows();
        let sym = (a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut lams = Vec::with_capacity(dim);
        let mut vecs = Vec::with_capacity(dim);
        for &j in &order {
            let l = eig.eigenvalues[j];
            if l < -tau_eig {
                return Err(AnalysisError::FitFailed(format!(
                    "matrix not PSD: eigenvalue {l:.3e} below -{tau_eig:.3e}"
                )));
            }
            lams.push(l.max(0.0));
            vecs.push(sign_normalized(eig.eigenvectors.column(j).iter().copied().collect()));
        }
        let mut clamped = DMatrix::zeros(dim, dim);
        for (l, v) in lams.iter().zip(&vecs) {
            let col = DVector::from_column_slice(v);
            clamped += &col * col.transpose() * *l;
        }
        let n = lams.iter().filter(|&&l| l < tau_eig).count();
        let c_p = lams.iter().copied().find(|&l| l >= tau_eig).unwrap_or(0.0);
        Ok(BlowupPolynomial {
            a: (0..dim).map(|i| (0..dim).map(|j| clamped[(i, j)]).collect()).collect(),
            trace_target,
            eigenvalues: lams,
            n,
            c_p,
            kernel_basis: vecs[..n].to_vec(),
            tau_eig,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.a[i][j])
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.a[i][j] * x[i] * x[j]).sum::<f64>())
            .sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.a[i][i]).sum()
    }

    /// Restriction to the coordinate axes `axes` (the `x′` part for an
    /// axis-aligned kernel).
    pub fn restrict(&self, axes: &[usize]) -> Result<BlowupPolynomial, AnalysisError> {
        let k = axes.len();
        let sub = DMatrix::from_fn(k, k, |i, j| self.a[axes[i]][axes[j]]);
        let tr = sub.trace();
        BlowupPolynomial::from_matrix(&sub, tr, self.tau_eig.max(1e-12))
    }

    /// Largest entry of `A - B` in absolute value.
    pub fn max_abs_diff(&self, other: &DMatrix<f64>) -> f64 {
        (self.matrix() - other).amax()
    }
}

/// Constrained least-squares quadratic fit over the nodes of `B₁`.
///
/// Minimizes `Σ (v(z) - zᵀAz)²` over symmetric `A` with `tr A = trace_target`;
/// the last diagonal entry is eliminated through the constraint. `h` is the
/// spacing of the grid `v` was resampled from and enters the eigenvalue
/// threshold.
pub fn fit_quadratic(v: &ScalarField, trace_target: f64, h: f64) -> Result<(BlowupPolynomial, f64), AnalysisError> {
    let g = v.grid();
    let dim = g.dim();
    let last = dim - 1;
    let nodes = unit_ball_nodes(v);
    // unknowns: A_ii for i < last, then A_ij for i < j
    let mut pairs = Vec::new();
    for i in 0..last {
        pairs.push((i, i));
    }
    for i in 0..dim {
        for j in i + 1..dim {
            pairs.push((i, j));
        }
    }
    let k = pairs.len();
    let vals = v.values();
    let feature = |z: &[f64], &(i, j): &(usize, usize)| {
        if i == j {
            z[i] * z[i] - z[last] * z[last]
        } else {
            2.0 * z[i] * z[j]
        }
    };
    let mut ata = DMatrix::<f64>::zeros(k, k);
    let mut atb = DVector::<f64>::zeros(k);
    for &n in &nodes {
        let z = g.node_position(n);
        let f: Vec<f64> = pairs.iter().map(|p| feature(&z[..dim], p)).collect();
        let rhs = vals[n] - trace_target * z[last] * z[last];
        for a in 0..k {
            atb[a] += f[a] * rhs;
            for b in 0..k {
                ata[(a, b)] += f[a] * f[b];
            }
        }
    }
    let theta = if k == 0 {
        DVector::zeros(0)
    } else {
        ata.cholesky()
            .ok_or_else(|| AnalysisError::FitFailed("singular normal equations".into()))?
            .solve(&atb)
    };
    let mut a = DMatrix::zeros(dim, dim);
    let mut diag_sum = 0.0;
    for (t, &(i, j)) in pairs.iter().enumerate() {
        a[(i, j)] = theta[t];
        a[(j, i)] = theta[t];
        if i == j {
            diag_sum += theta[t];
        }
    }
    a[(last, last)] = trace_target - diag_sum;
    let mut ss = 0.0;
    for &n in &nodes {
        let z = g.node_position(n);
        let mut p = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                p += a[(i, j)] * z[i] * z[j];
            }
        }
        ss += (vals[n] - p).powi(2);
    }
    let residual = (ss / nodes.len() as f64).sqrt();
    let tau_eig = 10.0 * (residual + h * h);
    let poly = BlowupPolynomial::from_matrix(&a, trace_target, tau_eig)?;
    Ok((poly, residual))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpaceModel {
    pub e: Vec<f64>,
    pub coeff: f64,
}

impl HalfSpaceModel {
    pub fn eval(&self, z: &[f64]) -> f64 {
        let s: f64 = self.e.iter().zip(z).map(|(a, b)| a * b).sum();
        self.coeff * s.max(0.0).powi(2) / 2.0
    }
}

struct BallSamples {
    z: Vec<[f64; 3]>,
    v: Vec<f64>,
}

impl BallSamples {
    fn new(v: &ScalarField) -> Self {
        let g = v.grid();
        let nodes = unit_ball_nodes(v);
        BallSamples {
            z: nodes.iter().map(|&i| g.node_position(i)).collect(),
            v: nodes.iter().map(|&i| v.values()[i]).collect(),
        }
    }

    fn objective(&self, e: &[f64], coeff: f64) -> (f64, Vec<f64>) {
        let dim = e.len();
        let mut f = 0.0;
        let mut grad = vec![0.0; dim];
        for (z, &v) in self.z.iter().zip(&self.v) {
            let s: f64 = (0..dim).map(|a| e[a] * z[a]).sum::<f64>().max(0.0);
            let diff = v - coeff * s * s / 2.0;
            f += diff * diff;
            for a in 0..dim {
                grad[a] -= 2.0 * diff * coeff * s * z[a];
            }
        }
        let n = self.z.len() as f64;
        (f / n, grad.into_iter().map(|x| x / n).collect())
    }
}

/// RMS of `v - coeff·max(z·e, 0)²/2` over the nodes of `B₁`.
pub fn halfspace_residual(v: &ScalarField, e: &[f64], coeff: f64) -> f64 {
    BallSamples::new(v).objective(e, coeff).0.sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub const HALFSPACE_MAX_ITER: usize = 200;

/// Best half-space solution `coeff·max(z·e,0)²/2` over unit `e`, by projected
/// gradient descent on the sphere started from the mean gradient of `v`.
pub fn fit_halfspace(v: &ScalarField, coeff: f64) -> Result<(HalfSpaceModel, f64), AnalysisError> {
    if !(coeff > 0.0) {
        return Err(AnalysisError::FitFailed(format!("coefficient must be positive, got {coeff}")));
    }
    let g = v.grid();
    let dim = g.dim();
    let vals = v.values();
    let vmax = vals.iter().copied().fold(0.0, f64::max);
    let tau = 1e-3 * vmax;
    let mut mean = vec![0.0; dim];
    let mut abs_mean = 0.0;
    let mut count = 0usize;
    for i in unit_ball_nodes(v) {
        if vals[i] > tau && vmax > 0.0 {
            let m = g.node_multi(i);
            let gr = v.gradient(&m[..dim]);
            for a in 0..dim {
                mean[a] += gr[a];
            }
            abs_mean += gr.iter().map(|x| x * x).sum::<f64>().sqrt();
            count += 1;
        }
    }
    let norm = normalize(&mut mean);
    if count == 0 || norm <= DIRECTION_DEGENERACY * abs_mean {
        return Err(AnalysisError::FitFailed("no direction signal in the mean gradient".into()));
    }
    let samples = BallSamples::new(v);
    let mut e = mean;
    let (mut f, mut grad) = samples.objective(&e, coeff);
    let mut step = 0.5;
    for _ in 0..HALFSPACE_MAX_ITER {
        let radial: f64 = grad.iter().zip(&e).map(|(a, b)| a * b).sum();
        let tangent: Vec<f64> = grad.iter().zip(&e).map(|(a, b)| a - radial * b).collect();
        let tnorm = tangent.iter().map(|x| x * x).sum::<f64>().sqrt();
        if tnorm < 1e-15 {
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            let mut trial: Vec<f64> = e.iter().zip(&tangent).map(|(a, b)| a - step * b).collect();
            normalize(&mut trial);
            let (ft, gt) = samples.objective(&trial, coeff);
            if ft < f {
                e = trial;
                f = ft;
                grad = gt;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((HalfSpaceModel { e, coeff }, f.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub r: f64,
    pub quad_res: Option<f64>,
    pub half_res: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Verdict {
    Regular(HalfSpaceModel),
    Singular(BlowupPolynomial),
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointClassification {
    pub x0: Vec<f64>,
    pub verdict: Verdict,
    pub residual_table: Vec<ResidualRow>,
    /// Threshold applied at the smallest usable radius.
    pub tau_class: f64,
}

impl PointClassification {
    pub fn is_regular(&self) -> bool {
        matches!(self.verdict, Verdict::Regular(_))
    }

    pub fn is_singular(&self) -> bool {
        matches!(self.verdict, Verdict::Singular(_))
    }
}

/// Fit both models on each window of a strictly decreasing radius schedule
/// and decide at the smallest radius whose window fits in the domain.
pub fn classify_point(
    u: &ScalarField,
    c_at_x0: f64,
    x0: &[f64],
    radii: &[f64],
) -> Result<PointClassification, AnalysisError> {
    if radii.is_empty() || radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(AnalysisError::Schedule("radii must be non-empty and strictly decreasing".into()));
    }
    let g = u.grid();
    let dim = g.dim();
    let mut table = Vec::new();
    let mut last = None;
    for &r in radii {
        let out = window_grid(dim, r, g.h_max());
        let v = match rescale(u, x0, r, &out) {
            Ok(v) => v,
            Err(AnalysisError::OutOfDomain { .. }) => continue,
            Err(e) => return Err(e),
        };
        let quad = fit_quadratic(&v, c_at_x0 / 2.0, g.h_max()).ok();
        let half = fit_halfspace(&v, c_at_x0).ok();
        table.push(ResidualRow {
            r,
            quad_res: quad.as_ref().map(|q| q.1),
            half_res: half.as_ref().map(|h| h.1),
        });
        last = Some((v, quad, half));
    }
    let undetermined = |table, tau_class| PointClassification {
        x0: x0.to_vec(),
        verdict: Verdict::Undetermined,
        residual_table: table,
        tau_class,
    };
    if table.len() < 2 {
        return Ok(undetermined(table, 0.0));
    }
    let (v, quad, half) = last.expect("at least two usable radii");
    let tau_class = CLASS_FRACTION * window_rms(&v);
    let qr = quad.as_ref().map_or(f64::INFINITY, |q| q.1);
    let hr = half.as_ref().map_or(f64::INFINITY, |h| h.1);
    let verdict = if tau_class > 0.0 && hr < tau_class && CLASS_MARGIN * hr <= qr {
        Verdict::Regular(half.expect("finite residual").0)
    } else if tau_class > 0.0 && qr < tau_class && CLASS_MARGIN * qr <= hr {
        Verdict::Singular(quad.expect("finite residual").0)
    } else {
        Verdict::Undetermined
    };
    Ok(PointClassification {
        x0: x0.to_vec(),
        verdict,
        residual_table: table,
        tau_class,
    })
}

pub fn write_residual_table_csv<W: Write>(rows: &[ResidualRow], mut w: W) -> io::Result<()> {
    writeln!(w, "r,quad_res,half_res")?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
    for row in rows {
        writeln!(w, "{:.10e},{},{}", row.r, f(row.quad_res), f(row.half_res))?;
    }
    Ok(())
}

/// Move a point near the free boundary onto it, assuming half-space growth
/// `u ≈ c·s²/2` at distance `s` outside the coincidence set.
///
/// Probes two cell widths along `∇u` and steps back by `√(2u/c)`.
pub fn locate_free_boundary_point(u: &ScalarField, x: &[f64], c: f64) -> Option<Vec<f64>> {
    let g = u.grid();
    let dim = g.dim();
    let h = g.h_max();
    let grad_at = |p: &[f64]| -> Option<Vec<f64>> {
        let mut gr = vec![0.0; dim];
        for a in 0..dim {
            let mut q = p.to_vec();
            let mut r = p.to_vec();
            q[a] += h;
            r[a] -= h;
            gr[a] = (u.interpolate(&q).ok()? - u.interpolate(&r).ok()?) / (2.0 * h);
        }
        Some(gr)
    };
    let mut p = x.to_vec();
    for _ in 0..3 {
        let mut n = grad_at(&p)?;
        if normalize(&mut n) == 0.0 {
            return None;
        }
        let probe: Vec<f64> = (0..dim).map(|a| p[a] + 2.0 * h * n[a]).collect();
        let up = u.interpolate(&probe).ok()?;
        let mut n2 = grad_at(&probe)?;
        if normalize(&mut n2) == 0.0 {
            return None;
        }
        let s = (2.0 * up.max(0.0) / c).sqrt();
        p = (0..dim).map(|a| probe[a] - s * n2[a]).collect();
    }
    Some(p)
}

/// Squared gradient magnitudes of `h⁺` and `h⁻`, reused across radii.
#[derive(Debug, Clone)]
pub struct AcfIntegrand {
    plus: ScalarField,
    minus: ScalarField,
}

impl AcfIntegrand {
    pub fn new(h: &ScalarField) -> Self {
        AcfIntegrand {
            plus: h.positive_part().gradient_norm_sq(),
            minus: h.negative_part().gradient_norm_sq(),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.plus.grid()
    }

    /// `φ(h, r, y)`.
    pub fn phi(&self, y: &[f64], r: f64) -> Result<f64, AnalysisError> {
        let g = self.grid();
        let min = 4.0 * g.h_max();
        if r < min * (1.0 - 1e-12) {
            return Err(AnalysisError::Resolution { r, min });
        }
        let m = g.dim() as f64 - 2.0;
        let ip = integrate_ball(&self.plus, y, r, m)?;
        let im = integrate_ball(&self.minus, y, r, m)?;
        Ok(ip * im / r.powi(4))
    }
}

pub fn acf(h: &ScalarField, y: &[f64], r: f64) -> Result<f64, AnalysisError> {
    AcfIntegrand::new(h).phi(y, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfReport {
    pub rows: Vec<(f64, f64)>,
    /// `max_{r₁<r₂} φ(r₁) - (1 + r₂²) φ(r₂)`.
    pub violation: f64,
    pub max_phi: f64,
}

pub fn acf_monotonicity(h: &ScalarField, y: &[f64], radii: &[f64]) -> Result<AcfReport, AnalysisError> {
    if radii.len() < 2 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::Schedule("ACF radii must be at least two, strictly increasing".into()));
    }
    let integrand = AcfIntegrand::new(h);
    let phis: Result<Vec<f64>, AnalysisError> = radii.iter().map(|&r| integrand.phi(y, r)).collect();
    let phis = phis?;
    let mut violation = f64::NEG_INFINITY;
    for i in 0..phis.len() {
        for j in i + 1..phis.len() {
            violation = violation.max(phis[i] - (1.0 + radii[j] * radii[j]) * phis[j]);
        }
    }
    Ok(AcfReport {
        rows: radii.iter().copied().zip(phis.iter().copied()).collect(),
        violation,
        max_phi: phis.iter().copied().fold(0.0, f64::max),
    })
}

pub fn write_acf_csv<W: Write>(rows: &[(f64, f64)], mut w: W) -> io::Result<()> {
    writeln!(w, "r,phi")?;
    for (r, phi) in rows {
        writeln!(w, "{r:.10e},{phi:.10e}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedScale {
    pub r: f64,
    pub measure: f64,
    pub target: f64,
    /// One cell volume in rescaled units at `r`.
    pub cell_tol: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `|{u_{r,x}=0} ∩ B₁|`: flagged volume in `B_r(x)` over `r^dim`.
pub fn rescaled_measure(mask: &Mask, x: &[f64], r: f64) -> f64 {
    let g = mask.grid();
    let n = cells_in_ball(g, x, r).into_iter().filter(|&i| mask.get(i)).count();
    n as f64 * g.cell_volume() / r.powi(g.dim() as i32)
}

/// Bisection for the radius at which the rescaled coincidence set fills
/// `fraction` of the unit ball.
pub fn find_balanced_rescaling(
    mask: &Mask,
    xk: &[f64],
    fraction: f64,
    bracket: (f64, f64),
) -> Result<BalancedScale, AnalysisError> {
    let g = mask.grid();
    let dim = g.dim();
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) || !(fraction > 0.0 && fraction < 1.0) {
        return Err(AnalysisError::Schedule(format!(
            "bracket ({lo}, {hi}) and fraction {fraction} must satisfy 0 < r_lo < r_hi, 0 < fraction < 1"
        )));
    }
    let target = fraction * unit_ball_volume(dim);
    let m_lo = rescaled_measure(mask, xk, lo);
    let m_hi = rescaled_measure(mask, xk, hi);
    if !(m_lo >= target && target >= m_hi) {
        return Err(AnalysisError::NoBalancedScale {
            r_lo: lo,
            r_hi: hi,
            m_lo,
            m_hi,
            target,
        });
    }
    let tol_at = |r: f64| g.cell_volume() / r.powi(dim as i32);
    let mut iterations = 0;
    loop {
        let mid = 0.5 * (lo + hi);
        let m = rescaled_measure(mask, xk, mid);
        iterations += 1;
        let tol = tol_at(mid);
        let converged = (m - target).abs() <= tol;
        if converged || iterations >= 200 || hi - lo <= 1e-14 * hi {
            return Ok(BalancedScale {
                r: mid,
                measure: m,
                target,
                cell_tol: tol,
                converged,
                iterations,
            });
        }
        if m >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEllipsoid {
    /// Diameter-1 shape.
    pub normalized: Ellipsoid,
    /// Moment fit of the discrete coincidence set before normalization.
    pub fitted: Ellipsoid,
    pub shift: f64,
    pub iterations: usize,
}

/// Solve the `x′`-dimensional problem with `c ≡ 2 tr A′` and boundary data
/// `max(x·A′x - shift, 0)`, then fit and normalize its coincidence set.
///
/// Homogeneous data alone would reproduce `x·A′x` as the solution, whose
/// coincidence set is the origin; the shift opens a bounded set with the same
/// blow-down. `shift = None` takes a quarter of the boundary minimum.
pub fn reference_ellipsoid(
    pprime: &BlowupPolynomial,
    grid: &GridSpec,
    opts: &SolveOptions,
    shift: Option<f64>,
) -> Result<ReferenceEllipsoid, AnalysisError> {
    if pprime.dim() != grid.dim() {
        return Err(AnalysisError::Grid(GridError::Mismatch));
    }
    if pprime.n > 0 || !(pprime.c_p > 0.0) {
        return Err(AnalysisError::Inconclusive(format!(
            "p′ must be positive definite (c_p = {}, kernel dimension {})",
            pprime.c_p, pprime.n
        )));
    }
    let a = pprime.matrix();
    let c = 2.0 * a.trace();
    let shift = shift.unwrap_or_else(|| default_shift(grid, &a));
    if !(shift > 0.0) {
        return Err(AnalysisError::Inconclusive(format!("shift must be positive, got {shift}")));
    }
    let problem = shifted_quadratic_problem(grid, &a, c, shift)?;
    let sol = solve_psor(&problem, opts)?;
    if !sol.converged {
        return Err(AnalysisError::Inconclusive(format!(
            "reference solve did not converge in {} sweeps",
            sol.iterations
        )));
    }
    let mask = coincidence_mask(&sol.u, default_eps_u(grid, opts.tol, c));
    if mask.is_empty() {
        return Err(AnalysisError::Inconclusive(
            "empty coincidence set; enlarge the box or the shift".into(),
        ));
    }
    let fitted = fit_ellipsoid(&mask).map_err(|e| match e {
        GeometryError::DegenerateFit(msg) => {
            AnalysisError::Inconclusive(format!("{msg}; refine the grid or enlarge the box"))
        }
        other => other.into(),
    })?;
    Ok(ReferenceEllipsoid {
        normalized: fitted.normalized(),
        fitted,
        shift,
        iterations: sol.iterations,
    })
}

/// Resample `u` on an axis-aligned grid in the orthonormal frame whose
/// columns are `frame`, centered at `x0`. The largest cube that fits in the
/// original box is used, at the original finest spacing.
pub fn resample_in_frame(u: &ScalarField, frame: &DMatrix<f64>, x0: &[f64]) -> Result<ScalarField, AnalysisError> {
    let g = u.grid();
    let dim = g.dim();
    let mut half = f64::INFINITY;
    for a in 0..dim {
        let reach: f64 = (0..dim).map(|j| frame[(a, j)].abs()).sum();
        let room = (x0[a] - g.origin()[a]).min(g.upper(a) - x0[a]);
        half = half.min(room / reach);
    }
    if !(half > 0.0) {
        return Err(AnalysisError::OutOfDomain { x0: x0.to_vec(), r: 0.0 });
    }
    let cells = ((2.0 * half / g.h_min()).floor() as usize).max(4);
    let out = GridSpec::cube(dim, -half, half, cells)?;
    let vals = par::map_range(out.node_count(), |i| {
        let y = out.node_position(i);
        let x: Vec<f64> = (0..dim)
            .map(|a| {
                let v = x0[a] + (0..dim).map(|j| frame[(a, j)] * y[j]).sum::<f64>();
                v.clamp(g.origin()[a], g.upper(a))
            })
            .collect();
        u.interpolate(&x)
    });
    let vals: Result<Vec<f64>, GridError> = vals.into_iter().collect();
    Ok(ScalarField::from_values(&out, vals?)?)
}

/// Orthonormal frame with the complement of `kernel_basis` first and the
/// kernel vectors last.
pub fn kernel_frame(dim: usize, kernel_basis: &[Vec<f64>]) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let kernel: Vec<DVector<f64>> = kernel_basis.iter().map(|v| DVector::from_column_slice(v)).collect();
    let mut basis: Vec<DVector<f64>> = kernel.clone();
    for a in 0..dim {
        let mut e = DVector::zeros(dim);
        e[a] = 1.0;
        for b in &basis {
            let d = b.dot(&e);
            e -= b * d;
        }
        if e.norm() > 1e-8 {
            let e = e.normalize();
            basis.push(e.clone());
            cols.push(e);
        }
        if cols.len() + kernel.len() == dim {
            break;
        }
    }
    cols.extend(kernel);
    DMatrix::from_columns(&cols)
}

/// Whether each kernel vector is a signed coordinate axis.
pub fn kernel_is_axis_aligned(dim: usize, kernel_basis: &[Vec<f64>]) -> bool {
    geometry::axis_split(dim, kernel_basis).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::make_scenario;
    use crate::solver::solve_psor;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn sq(dim: usize, cells: usize) -> GridSpec {
        GridSpec::cube(dim, -1.0, 1.0, cells).unwrap()
    }

    #[test]
    fn rescale_homogeneous_quadratics() {
        let g = sq(2, 64);
        let u = ScalarField::sample(&g, |x| x[0] * x[0] / 2.0).unwrap();
        let out = window_grid(2, 0.3, g.h_max());
        let v = rescale(&u, &[0.0, 0.0], 0.3, &out).unwrap();
        let want = ScalarField::sample(&out, |z| z[0] * z[0] / 2.0).unwrap();
        assert!(v.max_diff(&want).unwrap() <= g.h_max().powi(2) / (8.0 * 0.09) + 1e-12);
        let hs = ScalarField::sample(&g, |x| x[0].max(0.0).powi(2) / 2.0).unwrap();
        let v = rescale(&hs, &[0.0, 0.0], 0.25, &out).unwrap();
        let want = ScalarField::sample(&out, |z| z[0].max(0.0).powi(2) / 2.0).unwrap();
        assert!(v.max_diff(&want).unwrap() < 0.02);
        assert!(matches!(
            rescale(&u, &[0.9, 0.0], 0.25, &out),
            Err(AnalysisError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn rescale_radial_exact_at_free_boundary() {
        // closed-form radial solution at the free boundary looks like a half-space
        let g = sq(2, 256);
        let s = make_scenario("radial2d", &BTreeMap::new(), &g).unwrap();
        let u = s.exact_field(&g).unwrap().unwrap();
        let out = window_grid(2, 0.1, g.h_max());
        let v = rescale(&u, &[0.5, 0.0], 0.1, &out).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..out.node_count() {
            let z = out.node_position(i);
            if z[0] * z[0] + z[1] * z[1] <= 1.0 {
                worst = worst.max((v.values()[i] - z[0].max(0.0).powi(2) / 2.0).abs());
            }
        }
        assert!(worst <= 0.1, "{worst}");
    }

    #[test]
    fn quadratic_fit_examples() {
        let out = window_grid(2, 0.2, 1.0 / 128.0);
        let v = ScalarField::sample(&out, |z| z[0] * z[0] / 2.0).unwrap();
        let (p, res) = fit_quadratic(&v, 0.5, v.grid().h_max()).unwrap();
        assert!(res < 1e-12);
        assert!(p.max_abs_diff(&DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0])) < 1e-12);
        assert_eq!(p.n, 1);
        assert!((p.kernel_basis[0][1] - 1.0).abs() < 1e-12);
        let v = ScalarField::sample(&out, |z| (z[0] * z[0] + z[1] * z[1]) / 4.0).unwrap();
        let (p, _) = fit_quadratic(&v, 0.5, v.grid().h_max()).unwrap();
        assert_eq!(p.n, 0);
        assert!((p.c_p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn quadratic_fit_is_exact_in_3d_and_1d() {
        let out = window_grid(3, 0.2, 1.0 / 64.0);
        let a = [[0.2, 0.05, -0.03], [0.05, 0.1, 0.02], [-0.03, 0.02, 0.2]];
        let v = ScalarField::sample(&out, |z| {
            (0..3).map(|i| (0..3).map(|j| a[i][j] * z[i] * z[j]).sum::<f64>()).sum()
        })
        .unwrap();
        let (p, res) = fit_quadratic(&v, 0.5, v.grid().h_max()).unwrap();
        assert!(res < 1e-12, "{res}");
        for (row, want) in p.a.iter().zip(&a) {
            for (x, y) in row.iter().zip(want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let out1 = window_grid(1, 0.2, 1.0 / 64.0);
        let v = ScalarField::sample(&out1, |z| z[0] * z[0] / 2.0).unwrap();
        let (p, res) = fit_quadratic(&v, 0.5, v.grid().h_max()).unwrap();
        assert!(res < 1e-14 && p.n == 0);
    }

    #[test]
    fn halfspace_fit_examples() {
        let out = window_grid(2, 0.2, 1.0 / 128.0);
        let v = ScalarField::sample(&out, |z| z[0].max(0.0).powi(2) / 2.0).unwrap();
        let (m, res) = fit_halfspace(&v, 1.0).unwrap();
        assert!(res < 1e-12 && (m.e[0] - 1.0).abs() < 1e-12);
        let v = ScalarField::sample(&out, |z| (0.6 * z[0] + 0.8 * z[1]).max(0.0).powi(2) / 2.0).unwrap();
        let (m, _) = fit_halfspace(&v, 1.0).unwrap();
        assert!((m.e[0] - 0.6).abs() < 1e-6 && (m.e[1] - 0.8).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn two_sided_quadratic_is_far_from_every_half_space() {
        let out = window_grid(2, 0.2, 1.0 / 128.0);
        let v = ScalarField::sample(&out, |z| z[0] * z[0] / 2.0).unwrap();
        let norm = window_rms(&v);
        for k in 0..720 {
            let t = 2.0 * PI * k as f64 / 720.0;
            assert!(halfspace_residual(&v, &[t.cos(), t.sin()], 1.0) >= 0.1 * norm);
        }
        assert!(fit_halfspace(&v, 1.0).is_err());
    }

    #[test]
    fn half_space_beats_quadratic_for_rescaled_radial() {
        let g = sq(2, 256);
        let s = make_scenario("radial2d", &BTreeMap::new(), &g).unwrap();
        let u = s.exact_field(&g).unwrap().unwrap();
        let out = window_grid(2, 0.05, g.h_max());
        let v = rescale(&u, &[0.5, 0.0], 0.05, &out).unwrap();
        let (_, q) = fit_quadratic(&v, 0.5, v.grid().h_max()).unwrap();
        let (_, h) = fit_halfspace(&v, 1.0).unwrap();
        assert!(q >= 2.0 * h, "quad {q} half {h}");
    }

    #[test]
    fn classification_examples() {
        let g = sq(2, 128);
        let s = make_scenario("poly", &BTreeMap::new(), &g).unwrap();
        let sol = solve_psor(s.problem.as_ref().unwrap(), &SolveOptions::tuned(&g)).unwrap();
        let c = classify_point(&sol.u, 1.0, &[0.0, 0.0], &[0.4, 0.2, 0.1]).unwrap();
        match &c.verdict {
            Verdict::Singular(p) => {
                assert_eq!(p.n, 1);
                assert!(p.max_abs_diff(&DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0])) <= 0.05);
            }
            other => panic!("{other:?}"),
        }
        let z = ScalarField::zeros(&g);
        let c = classify_point(&z, 1.0, &[0.0, 0.0], &[0.4, 0.2]).unwrap();
        assert_eq!(c.verdict, Verdict::Undetermined);
        let c = classify_point(&z, 1.0, &[0.0, 0.0], &[0.4]).unwrap();
        assert_eq!(c.verdict, Verdict::Undetermined);
        assert!(classify_point(&z, 1.0, &[0.0, 0.0], &[0.2, 0.4]).is_err());
    }

    #[test]
    fn classification_radial_regular() {
        let g = sq(2, 256);
        let s = make_scenario("radial2d", &BTreeMap::new(), &g).unwrap();
        let u = s.exact_field(&g).unwrap().unwrap();
        let c = classify_point(&u, 1.0, &[0.5, 0.0], &[0.2, 0.1, 0.05]).unwrap();
        match &c.verdict {
            Verdict::Regular(m) => assert!((m.e[0] - 1.0).abs() + m.e[1].abs() <= 0.1, "{m:?}"),
            other => panic!("{other:?} {:?}", c.residual_table),
        }
    }

    #[test]
    fn matrix_comparison_on_poly_axis() {
        let g = sq(2, 64);
        let s = make_scenario("poly", &BTreeMap::new(), &g).unwrap();
        let sol = solve_psor(s.problem.as_ref().unwrap(), &SolveOptions::tuned(&g)).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        let out = window_grid(2, 0.2, g.h_max());
        let v = rescale(&sol.u, &[0.0, 0.3], 0.2, &out).unwrap();
        let (q, _) = fit_quadratic(&v, 0.5, v.grid().h_max()).unwrap();
        let q = q.matrix();
        for k in 0..360 {
            let t = 2.0 * PI * k as f64 / 360.0;
            let e = DVector::from_column_slice(&[t.cos(), t.sin()]);
            assert!((&q * &e).norm() <= (&a * &e).norm() + 1e-3);
        }
    }

    #[test]
    fn acf_closed_forms() {
        let g = sq(2, 128);
        let one_signed = ScalarField::sample(&g, |x| x[0].max(0.0)).unwrap();
        assert_eq!(acf(&one_signed, &[0.0, 0.0], 0.5).unwrap(), 0.0);
        let lin = ScalarField::sample(&g, |x| x[0]).unwrap();
        let r = acf_monotonicity(&lin, &[0.0, 0.0], &[0.25, 0.5, 0.75]).unwrap();
        for (_, phi) in &r.rows {
            assert!((phi - PI * PI / 4.0).abs() < 0.05 * PI * PI / 4.0, "{phi}");
        }
        let half = ScalarField::sample(&g, |x| x[0] / 2.0).unwrap();
        let phi = acf(&half, &[0.0, 0.0], 0.5).unwrap();
        assert!((phi - PI * PI / 64.0).abs() < 0.05 * PI * PI / 64.0, "{phi}");
        assert!(matches!(acf(&lin, &[0.0, 0.0], 0.01), Err(AnalysisError::Resolution { .. })));
    }

    #[test]
    fn balanced_rescaling_cases() {
        let g = sq(2, 400);
        let h = g.h_max();
        let disk = Mask::from_predicate(&g, |c| (c[0] - 0.1).powi(2) + c[1].powi(2) < 0.01);
        let b = find_balanced_rescaling(&disk, &[0.1, 0.0], 0.25, (0.11, 0.6)).unwrap();
        assert!(b.converged);
        assert!((b.measure - b.target).abs() <= b.cell_tol);
        assert!((b.r - 0.2).abs() <= 0.2 * h / 0.1, "{b:?}");
        let empty = Mask::empty(&g);
        assert!(matches!(
            find_balanced_rescaling(&empty, &[0.0, 0.0], 0.25, (0.1, 0.5)),
            Err(AnalysisError::NoBalancedScale { .. })
        ));
    }

    #[test]
    fn reference_ellipsoid_cases() {
        let g = sq(2, 128);
        let h = g.h_max();
        let radial = BlowupPolynomial::from_matrix(&DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.25]), 0.5, 1e-12).unwrap();
        let e = reference_ellipsoid(&radial, &g, &SolveOptions::tuned(&g), None).unwrap();
        assert!((e.normalized.diameter() - 1.0).abs() < 1e-12);
        assert!((e.normalized.axis_ratio() - 1.0).abs() < 0.05);
        let aniso = BlowupPolynomial::from_matrix(&DMatrix::from_row_slice(2, 2, &[0.15, 0.0, 0.0, 0.35]), 0.5, 1e-12).unwrap();
        let e = reference_ellipsoid(&aniso, &g, &SolveOptions::tuned(&g), None).unwrap();
        assert!(e.normalized.axis(0)[0].abs() > 0.99, "{e:?}");
        let one = BlowupPolynomial::from_matrix(&DMatrix::from_row_slice(1, 1, &[0.25]), 0.25, 1e-12).unwrap();
        let g1 = sq(1, 256);
        let e = reference_ellipsoid(&one, &g1, &SolveOptions::tuned(&g1), None).unwrap();
        assert!((e.normalized.diameter() - 1.0).abs() < 1e-12);
        let degenerate = BlowupPolynomial::from_matrix(&DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]), 0.5, 1e-12).unwrap();
        assert!(reference_ellipsoid(&degenerate, &g, &SolveOptions::tuned(&g), None).is_err());
        let _ = h;
    }

    #[test]
    fn locate_point_on_radial_boundary() {
        let g = sq(2, 128);
        let s = make_scenario("radial2d", &BTreeMap::new(), &g).unwrap();
        let u = s.exact_field(&g).unwrap().unwrap();
        let p = locate_free_boundary_point(&u, &[0.49, 0.03], 1.0).unwrap();
        let r = p[0].hypot(p[1]);
        assert!((r - 0.5).abs() < 0.1 * g.h_max(), "{r}");
    }

    #[test]
    fn frame_resampling() {
        let t: f64 = 0.3;
        let frame = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        let g = sq(2, 64);
        let u = ScalarField::sample(&g, |x| {
            let y0 = t.cos() * x[0] + t.sin() * x[1];
            y0 * y0 / 2.0
        })
        .unwrap();
        let v = resample_in_frame(&u, &frame, &[0.0, 0.0]).unwrap();
        let want = ScalarField::sample(v.grid(), |y| y[0] * y[0] / 2.0).unwrap();
        assert!(v.max_diff(&want).unwrap() < g.h_max().powi(2));
        let k = kernel_frame(2, &[vec![0.0, 1.0]]);
        assert_eq!(k.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert!(kernel_is_axis_aligned(2, &[vec![0.0, -1.0]]));
    }
}
