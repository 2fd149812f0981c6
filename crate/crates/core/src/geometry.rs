//! Coincidence sets and their geometry: free-boundary extraction, cross
//! sections in the kernel frame, diameters, the `ν″` direction field,
//! ellipsoid fits, Hausdorff distances and tip asymptotics.
//!
//! Points are split as `x = (x′, x″)` where `x″` collects the coordinates
//! along a kernel basis and `x′` the rest. Slice operations require the
//! kernel basis to be aligned with grid axes (up to sign); callers with a
//! rotated basis resample the field into an aligned frame first.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridSpec, Mask, ScalarField, MAX_DIM};
use crate::par;

/// Relative threshold below which the `ν″` moment counts as vanishing.
pub const NU_DEGENERACY: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate direction: first moment {norm:.3e} below threshold {threshold:.3e}")]
    DegenerateDirection { norm: f64, threshold: f64 },
    #[error("degenerate ellipsoid fit: {0}")]
    DegenerateFit(String),
    #[error("Hausdorff distance undefined for an empty set")]
    EmptySet,
    #[error("kernel basis is not aligned with the grid axes")]
    NotAxisAligned,
    #[error("slice coordinate {0:?} lies outside the box")]
    SliceOutside(Vec<f64>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid ellipsoid: {0}")]
    InvalidEllipsoid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    center: Vec<f64>,
    semi_axes: Vec<f64>,
    /// Row-major `dim × dim`; column `j` is the direction of `semi_axes[j]`.
    rotation: Vec<f64>,
}

impl Ellipsoid {
    /// Semi-axes are reordered descending together with their directions.
    pub fn new(center: Vec<f64>, semi_axes: Vec<f64>, rotation: DMatrix<f64>) -> Result<Self, GeometryError> {
        let dim = center.len();
        if semi_axes.len() != dim || rotation.nrows() != dim || rotation.ncols() != dim {
            return Err(GeometryError::InvalidEllipsoid("shape mismatch".into()));
        }
        if semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(GeometryError::InvalidEllipsoid(format!(
                "semi-axes must be positive, got {semi_axes:?}"
            )));
        }
        let gram = rotation.transpose() * &rotation;
        let off = (gram - DMatrix::identity(dim, dim)).amax();
        if off > 1e-10 {
            return Err(GeometryError::InvalidEllipsoid(format!(
                "rotation not orthonormal (deviation {off:.2e})"
            )));
        }
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| semi_axes[b].total_cmp(&semi_axes[a]));
        let axes = order.iter().map(|&j| semi_axes[j]).collect();
        let mut rot = vec![0.0; dim * dim];
        for (k, &j) in order.iter().enumerate() {
            for i in 0..dim {
                rot[i * dim + k] = rotation[(i, j)];
            }
        }
        Ok(Ellipsoid {
            center,
            semi_axes: axes,
            rotation: rot,
        })
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, GeometryError> {
        let dim = center.len();
        Self::new(center, vec![radius; dim], DMatrix::identity(dim, dim))
    }

    pub fn axis_aligned(center: Vec<f64>, semi_axes: Vec<f64>) -> Result<Self, GeometryError> {
        let dim = center.len();
        Self::new(center, semi_axes, DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn semi_axes(&self) -> &[f64] {
        &self.semi_axes
    }

    pub fn rotation(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.rotation)
    }

    /// Direction of the `j`-th semi-axis.
    pub fn axis(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.rotation[i * d + j]).collect()
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.semi_axes[0]
    }

    /// Ratio of the largest to the smallest semi-axis.
    pub fn axis_ratio(&self) -> f64 {
        self.semi_axes[0] / self.semi_axes[self.dim() - 1]
    }

    fn local(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| (0..d).map(|i| self.rotation[i * d + j] * (x[i] - self.center[i])).sum())
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let l = self.local(x);
        l.iter()
            .zip(&self.semi_axes)
            .map(|(v, a)| (v / a).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn scaled(&self, factor: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center.clone(),
            semi_axes: self.semi_axes.iter().map(|a| a * factor).collect(),
            rotation: self.rotation.clone(),
        }
    }

    pub fn with_center(&self, center: Vec<f64>) -> Ellipsoid {
        assert_eq!(center.len(), self.dim());
        Ellipsoid {
            center,
            semi_axes: self.semi_axes.clone(),
            rotation: self.rotation.clone(),
        }
    }

    /// Rescaled about its center to diameter 1.
    pub fn normalized(&self) -> Ellipsoid {
        self.scaled(1.0 / self.diameter())
    }

    fn to_world(&self, local: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                self.center[i]
                    + (0..d)
                        .map(|j| self.rotation[i * d + j] * self.semi_axes[j] * local[j])
                        .sum::<f64>()
            })
            .collect()
    }

    /// `64·dim` boundary samples (the two endpoints in 1D).
    pub fn boundary_samples(&self) -> Vec<Vec<f64>> {
        match self.dim() {
            1 => vec![self.to_world(&[-1.0]), self.to_world(&[1.0])],
            2 => (0..128)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / 128.0;
                    self.to_world(&[t.cos(), t.sin()])
                })
                .collect(),
            _ => {
                let n = 192;
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                (0..n)
                    .map(|k| {
                        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                        let r = (1.0 - z * z).sqrt();
                        let t = golden * k as f64;
                        self.to_world(&[r * t.cos(), r * t.sin(), z])
                    })
                    .collect()
            }
        }
    }

    /// Cells whose centers lie inside.
    pub fn to_mask(&self, grid: &GridSpec) -> Result<Mask, GeometryError> {
        if grid.dim() != self.dim() {
            return Err(GeometryError::Dimension("ellipsoid vs grid".into()));
        }
        Ok(Mask::from_predicate(grid, |c| self.contains(c)))
    }
}

/// `max(10·tol, h²·‖c‖∞/4)`.
pub fn default_eps_u(grid: &GridSpec, solver_tol: f64, c_max: f64) -> f64 {
    (10.0 * solver_tol).max(grid.h_max().powi(2) * c_max / 4.0)
}

/// Cells whose corner values are all `≤ eps_u`.
pub fn coincidence_mask(u: &ScalarField, eps_u: f64) -> Mask {
    let g = u.grid();
    let dim = g.dim();
    Mask::from_flags(
        g,
        par::map_range(g.cell_count(), |i| {
            let m = g.cell_multi(i);
            u.cell_corners(&m[..dim]).all(|v| v <= eps_u)
        }),
    )
    .expect("flag count matches cell count")
}

/// Centers of the faces between flagged and unflagged cells.
pub fn free_boundary(mask: &Mask) -> Vec<Vec<f64>> {
    let g = mask.grid();
    let dim = g.dim();
    let strides = g.cell_strides();
    let h = g.spacings();
    let per_cell = par::map_range(g.cell_count(), |i| {
        let mut out = Vec::new();
        if !mask.get(i) {
            return out;
        }
        let m = g.cell_multi(i);
        let c = g.cell_center_multi(&m[..dim]);
        for a in 0..dim {
            if m[a] > 0 && !mask.get(i - strides[a]) {
                let mut p = c[..dim].to_vec();
                p[a] -= 0.5 * h[a];
                out.push(p);
            }
            if m[a] + 1 < g.cells()[a] && !mask.get(i + strides[a]) {
                let mut p = c[..dim].to_vec();
                p[a] += 0.5 * h[a];
                out.push(p);
            }
        }
        out
    });
    per_cell.into_iter().flatten().collect()
}

/// Cell indices whose centers lie in the open ball `B_r(x)`.
pub fn cells_in_ball(grid: &GridSpec, x: &[f64], r: f64) -> Vec<usize> {
    let dim = grid.dim();
    let h = grid.spacings();
    let mut lo = [0usize; MAX_DIM];
    let mut hi = [0usize; MAX_DIM];
    for a in 0..dim {
        let l = ((x[a] - r - grid.origin()[a]) / h[a] - 0.5).floor();
        let u = ((x[a] + r - grid.origin()[a]) / h[a] - 0.5).ceil();
        let last = grid.cells()[a] as f64 - 1.0;
        if u < 0.0 || l > last {
            return Vec::new();
        }
        lo[a] = l.max(0.0) as usize;
        hi[a] = u.min(last) as usize;
    }
    let r2 = r * r;
    let mut out = Vec::new();
    let mut m = [0usize; MAX_DIM];
    for i0 in lo[0]..=hi[0] {
        m[0] = i0;
        for i1 in lo[1]..=hi[1] {
            m[1] = i1;
            for i2 in lo[2]..=hi[2] {
                m[2] = i2;
                let c = grid.cell_center_multi(&m[..dim]);
                let d2: f64 = (0..dim).map(|a| (c[a] - x[a]).powi(2)).sum();
                if d2 < r2 {
                    out.push(grid.cell_index(&m[..dim]));
                }
            }
        }
    }
    out
}

/// Axis assignment of an axis-aligned kernel basis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisSplit {
    /// Grid axes spanning `x′`, ascending.
    pub prime: Vec<usize>,
    /// Grid axis of each kernel vector.
    pub kernel: Vec<usize>,
    /// Sign of each kernel vector along its axis.
    pub signs: Vec<f64>,
}

pub fn axis_split(dim: usize, kernel_basis: &[Vec<f64>]) -> Result<AxisSplit, GeometryError> {
    let mut kernel = Vec::new();
    let mut signs = Vec::new();
    for b in kernel_basis {
        if b.len() != dim {
            return Err(GeometryError::Dimension("kernel vector length".into()));
        }
        let (axis, v) = b
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .ok_or(GeometryError::NotAxisAligned)?;
        if (v.abs() - 1.0).abs() > 1e-6 || kernel.contains(&axis) {
            return Err(GeometryError::NotAxisAligned);
        }
        kernel.push(axis);
        signs.push(v.signum());
    }
    let prime = (0..dim).filter(|a| !kernel.contains(a)).collect();
    Ok(AxisSplit { prime, kernel, signs })
}

/// `x″` coordinates of a point for a kernel basis.
pub fn double_prime(x: &[f64], kernel_basis: &[Vec<f64>]) -> Vec<f64> {
    kernel_basis
        .iter()
        .map(|b| b.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

/// A slice `{x″ = const}` of a mask, restricted to `B′_{2δ}((x⁰)′)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    /// `x″` of the cell layer actually used.
    pub xpp: Vec<f64>,
    /// Mask over the `x′` axes.
    pub mask: Mask,
    pub split: AxisSplit,
    /// Kernel-axis cell layer indices.
    pub layers: Vec<usize>,
}

impl CrossSection {
    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Max distance between boundary cell centers plus one cell diagonal.
    pub fn diameter(&self) -> f64 {
        mask_diameter(&self.mask)
    }

    /// Full-dimensional position of a slice cell.
    pub fn world_position(&self, slice_cell: usize, full: &GridSpec) -> Vec<f64> {
        let g = self.mask.grid();
        let m = g.cell_multi(slice_cell);
        let mut multi = [0usize; MAX_DIM];
        for (k, &a) in self.split.prime.iter().enumerate() {
            multi[a] = m[k];
        }
        for (k, &a) in self.split.kernel.iter().enumerate() {
            multi[a] = self.layers[k];
        }
        full.cell_center_multi(&multi[..full.dim()])[..full.dim()].to_vec()
    }
}

fn boundary_cells(mask: &Mask) -> Vec<usize> {
    let g = mask.grid();
    let dim = g.dim();
    let s = g.cell_strides();
    mask.flagged()
        .filter(|&i| {
            let m = g.cell_multi(i);
            (0..dim).any(|a| {
                m[a] == 0 || m[a] + 1 == g.cells()[a] || !mask.get(i - s[a]) || !mask.get(i + s[a])
            })
        })
        .collect()
}

/// Diameter of a mask measured on cell centers, inflated by one cell diagonal.
pub fn mask_diameter(mask: &Mask) -> f64 {
    let g = mask.grid();
    let dim = g.dim();
    let pts: Vec<_> = boundary_cells(mask)
        .into_iter()
        .map(|i| g.cell_center(i))
        .collect();
    if pts.is_empty() {
        return 0.0;
    }
    let best = par::max_range(pts.len(), |i| {
        let mut m: f64 = 0.0;
        for q in &pts[i + 1..] {
            let d2: f64 = (0..dim).map(|a| (pts[i][a] - q[a]).powi(2)).sum();
            m = m.max(d2);
        }
        m
    });
    best.sqrt() + g.cell_diagonal()
}

pub fn cross_section(
    mask: &Mask,
    xpp: &[f64],
    x0: &[f64],
    delta: f64,
    kernel_basis: &[Vec<f64>],
) -> Result<CrossSection, GeometryError> {
    let g = mask.grid();
    let dim = g.dim();
    let split = axis_split(dim, kernel_basis)?;
    if xpp.len() != split.kernel.len() || split.prime.is_empty() {
        return Err(GeometryError::Dimension("slice coordinate length".into()));
    }
    let mut layers = Vec::new();
    let mut actual = Vec::new();
    for (k, &a) in split.kernel.iter().enumerate() {
        let t = split.signs[k] * xpp[k];
        let layer = g
            .nearest_layer(a, t)
            .ok_or_else(|| GeometryError::SliceOutside(xpp.to_vec()))?;
        layers.push(layer);
        let center = g.origin()[a] + (layer as f64 + 0.5) * g.spacing(a);
        actual.push(split.signs[k] * center);
    }
    let sub = g.sub_grid(&split.prime)?;
    let radius2 = (2.0 * delta).powi(2);
    let flags = (0..sub.cell_count())
        .map(|j| {
            let sm = sub.cell_multi(j);
            let mut multi = [0usize; MAX_DIM];
            for (k, &a) in split.prime.iter().enumerate() {
                multi[a] = sm[k];
            }
            for (k, &a) in split.kernel.iter().enumerate() {
                multi[a] = layers[k];
            }
            if !mask.get_multi(&multi[..dim]) {
                return false;
            }
            let c = sub.cell_center_multi(&sm[..sub.dim()]);
            let d2: f64 = split
                .prime
                .iter()
                .enumerate()
                .map(|(k, &a)| (c[k] - x0[a]).powi(2))
                .sum();
            d2 < radius2
        })
        .collect();
    Ok(CrossSection {
        xpp: actual,
        mask: Mask::from_flags(&sub, flags)?,
        split,
        layers,
    })
}

pub fn diameter(cs: &CrossSection) -> f64 {
    cs.diameter()
}

/// `x″` coordinates of every non-empty slice layer (the set `I_δ`).
pub fn slice_index_set(
    mask: &Mask,
    x0: &[f64],
    delta: f64,
    kernel_basis: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, GeometryError> {
    let g = mask.grid();
    let dim = g.dim();
    let split = axis_split(dim, kernel_basis)?;
    let radius2 = (2.0 * delta).powi(2);
    let mut layers = BTreeSet::new();
    for i in mask.flagged() {
        let m = g.cell_multi(i);
        let c = g.cell_center_multi(&m[..dim]);
        let d2: f64 = split.prime.iter().map(|&a| (c[a] - x0[a]).powi(2)).sum();
        if d2 < radius2 {
            layers.insert(split.kernel.iter().map(|&a| m[a]).collect::<Vec<_>>());
        }
    }
    Ok(layers
        .into_iter()
        .map(|l| {
            l.iter()
                .enumerate()
                .map(|(k, &layer)| {
                    let a = split.kernel[k];
                    split.signs[k] * (g.origin()[a] + (layer as f64 + 0.5) * g.spacing(a))
                })
                .collect()
        })
        .collect())
}

/// Normalized first moment of `(x - y)″` over flagged cells in `B_d(x)`.
pub fn nu_direction(mask: &Mask, x: &[f64], d: f64, kernel_basis: &[Vec<f64>]) -> Result<Vec<f64>, GeometryError> {
    let g = mask.grid();
    let dim = g.dim();
    if !(d > 0.0) {
        return Err(GeometryError::InsufficientData(format!("radius must be positive, got {d}")));
    }
    let n = kernel_basis.len();
    let vol = g.cell_volume();
    let mut moment = vec![0.0; n];
    let mut flagged = 0.0;
    for i in cells_in_ball(g, x, d) {
        if !mask.get(i) {
            continue;
        }
        let c = g.cell_center(i);
        flagged += vol;
        for (k, b) in kernel_basis.iter().enumerate() {
            let proj: f64 = (0..dim).map(|a| b[a] * (x[a] - c[a])).sum();
            moment[k] += proj * vol;
        }
    }
    let norm = moment.iter().map(|v| v * v).sum::<f64>().sqrt();
    let threshold = NU_DEGENERACY * flagged * d;
    if norm <= threshold || norm == 0.0 {
        return Err(GeometryError::DegenerateDirection { norm, threshold });
    }
    Ok(moment.into_iter().map(|v| v / norm).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oscillation {
    pub osc: f64,
    pub sampled: usize,
    pub degenerate: usize,
}

/// Max pairwise `|ν″(y) - ν″(z)|` over up to 64 flagged cells in `B_d(x)`
/// closest to the sphere `∂B_d(x)`.
pub fn osc_nu(mask: &Mask, x: &[f64], d: f64, kernel_basis: &[Vec<f64>]) -> Result<Oscillation, GeometryError> {
    let g = mask.grid();
    let dim = g.dim();
    let mut cand: Vec<(f64, usize)> = cells_in_ball(g, x, d)
        .into_iter()
        .filter(|&i| mask.get(i))
        .map(|i| {
            let c = g.cell_center(i);
            let r = (0..dim).map(|a| (c[a] - x[a]).powi(2)).sum::<f64>().sqrt();
            ((d - r).abs(), i)
        })
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.truncate(64);
    if cand.is_empty() {
        return Err(GeometryError::DegenerateDirection { norm: 0.0, threshold: 0.0 });
    }
    let dirs = par::map_slice(&cand, |&(_, i)| {
        let c = g.cell_center(i);
        nu_direction(mask, &c[..dim], d, kernel_basis).ok()
    });
    let good: Vec<Vec<f64>> = dirs.iter().flatten().cloned().collect();
    let degenerate = dirs.len() - good.len();
    if good.is_empty() {
        return Err(GeometryError::DegenerateDirection { norm: 0.0, threshold: 0.0 });
    }
    let mut osc: f64 = 0.0;
    for (i, a) in good.iter().enumerate() {
        for b in &good[i + 1..] {
            let diff = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            osc = osc.max(diff);
        }
    }
    Ok(Oscillation {
        osc,
        sampled: good.len(),
        degenerate,
    })
}

/// Second-moment ellipsoid of the flagged cells: for a uniform solid
/// `m`-ellipsoid the covariance eigenvalues are `a_j² / (m + 2)`.
pub fn fit_ellipsoid(mask: &Mask) -> Result<Ellipsoid, GeometryError> {
    let g = mask.grid();
    let dim = g.dim();
    let count = mask.count();
    let needed = (dim + 1) * (dim + 2) / 2;
    if count < needed {
        return Err(GeometryError::DegenerateFit(format!(
            "{count} flagged cells, need at least {needed}"
        )));
    }
    if !mask.flagged().any(|i| mask.is_interior_cell(i)) {
        return Err(GeometryError::DegenerateFit("no interior cell".into()));
    }
    let pts: Vec<_> = mask.flagged().map(|i| g.cell_center(i)).collect();
    let n = pts.len() as f64;
    let mut mean = DVector::zeros(dim);
    for p in &pts {
        for a in 0..dim {
            mean[a] += p[a];
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in &pts {
        for a in 0..dim {
            for b in 0..dim {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut axes = Vec::with_capacity(dim);
    let mut rot = eig.eigenvectors.clone();
    for j in 0..dim {
        let lam = eig.eigenvalues[j];
        if !(lam > 0.0) {
            return Err(GeometryError::DegenerateFit(format!("non-positive moment {lam:e}")));
        }
        axes.push(((dim as f64 + 2.0) * lam).sqrt());
        // deterministic sign: largest component positive
        let col = rot.column(j).clone_owned();
        let (imax, _) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        if col[imax] < 0.0 {
            rot.set_column(j, &(-col));
        }
    }
    Ellipsoid::new(mean.iter().copied().collect(), axes, rot)
}

/// Inputs to [`hausdorff`].
#[derive(Debug, Clone, Copy)]
pub enum Shape<'a> {
    /// Boundary = free-boundary face centers.
    Mask(&'a Mask),
    /// Boundary = `64·dim` samples.
    Ellipsoid(&'a Ellipsoid),
    Points(&'a [Vec<f64>]),
}

impl Shape<'_> {
    fn boundary(&self) -> Vec<Vec<f64>> {
        match self {
            Shape::Mask(m) => free_boundary(m),
            Shape::Ellipsoid(e) => e.boundary_samples(),
            Shape::Points(p) => p.to_vec(),
        }
    }
}

fn directed(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    par::max_range(a.len(), |i| {
        b.iter()
            .map(|q| a[i].iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    })
    .sqrt()
}

/// Symmetric Hausdorff distance between boundary point clouds.
pub fn hausdorff(a: Shape<'_>, b: Shape<'_>) -> Result<f64, GeometryError> {
    let pa = a.boundary();
    let pb = b.boundary();
    if pa.is_empty() || pb.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    if pa[0].len() != pb[0].len() {
        return Err(GeometryError::Dimension("hausdorff operands".into()));
    }
    Ok(directed(&pa, &pb).max(directed(&pb, &pa)))
}

/// Flagged cells in `B_radius(x)` within one cell diagonal of the hyperplane
/// `(x - y)″·ν = 0`.
pub fn project_slice(
    mask: &Mask,
    x: &[f64],
    nu: &[f64],
    radius: f64,
    kernel_basis: &[Vec<f64>],
) -> Result<Mask, GeometryError> {
    let g = mask.grid();
    let dim = g.dim();
    if nu.len() != kernel_basis.len() {
        return Err(GeometryError::Dimension("ν length vs kernel basis".into()));
    }
    let norm = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(GeometryError::Dimension(format!("ν must be a unit vector, |ν| = {norm}")));
    }
    let slab = g.cell_diagonal();
    let mut out = Mask::empty(g);
    for i in cells_in_ball(g, x, radius) {
        if !mask.get(i) {
            continue;
        }
        let c = g.cell_center(i);
        let s: f64 = kernel_basis
            .iter()
            .zip(nu)
            .map(|(b, n)| n * (0..dim).map(|a| b[a] * (x[a] - c[a])).sum::<f64>())
            .sum();
        if s.abs() <= slab {
            out.set(i, true);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionReport {
    pub xpp: Vec<f64>,
    pub d: f64,
    /// Barycenter of the section in `x′` coordinates.
    pub t_prime: Option<Vec<f64>>,
    pub fitted: Option<Ellipsoid>,
    /// `hausdorff(section, t′ + d·E′) / d`.
    pub closeness: Option<f64>,
    pub nu: Option<Vec<f64>>,
}

fn barycenter(mask: &Mask) -> Option<Vec<f64>> {
    let g = mask.grid();
    let dim = g.dim();
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for i in mask.flagged() {
        let c = g.cell_center(i);
        for a in 0..dim {
            acc[a] += c[a];
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    Some(acc.into_iter().map(|v| v / n as f64).collect())
}

fn section_report(
    mask: &Mask,
    xpp: &[f64],
    x0: &[f64],
    delta: f64,
    eprime: &Ellipsoid,
    kernel_basis: &[Vec<f64>],
) -> Result<CrossSectionReport, GeometryError> {
    let cs = cross_section(mask, xpp, x0, delta, kernel_basis)?;
    let d = cs.diameter();
    if d == 0.0 {
        return Ok(CrossSectionReport {
            xpp: cs.xpp,
            d,
            t_prime: None,
            fitted: None,
            closeness: None,
            nu: None,
        });
    }
    let t = barycenter(&cs.mask).expect("non-empty section");
    let model = eprime.scaled(d).with_center(t.clone());
    let closeness = hausdorff(Shape::Mask(&cs.mask), Shape::Ellipsoid(&model))? / d;
    let fitted = fit_ellipsoid(&cs.mask).ok();
    let sg = cs.mask.grid();
    let far = cs
        .mask
        .flagged()
        .map(|j| {
            let c = sg.cell_center(j);
            let r2: f64 = (0..sg.dim()).map(|a| (c[a] - t[a]).powi(2)).sum();
            (r2, j)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, j)| j)
        .expect("non-empty section");
    let pos = cs.world_position(far, mask.grid());
    let nu = nu_direction(mask, &pos, d, kernel_basis).ok();
    Ok(CrossSectionReport {
        xpp: cs.xpp,
        d,
        t_prime: Some(t),
        fitted,
        closeness: Some(closeness),
        nu,
    })
}

/// Per-slice diameters, translations and closeness to the scaled reference
/// ellipsoid, sorted by `|x″ - (x⁰)″|`.
pub fn cross_section_convergence(
    mask: &Mask,
    x0: &[f64],
    delta: f64,
    eprime: &Ellipsoid,
    slices: &[Vec<f64>],
    kernel_basis: &[Vec<f64>],
) -> Result<Vec<CrossSectionReport>, GeometryError> {
    if (eprime.diameter() - 1.0).abs() > 1e-9 {
        return Err(GeometryError::InvalidEllipsoid(format!(
            "reference ellipsoid must have diameter 1, got {}",
            eprime.diameter()
        )));
    }
    if eprime.dim() + kernel_basis.len() != mask.grid().dim() {
        return Err(GeometryError::Dimension("reference ellipsoid dimension".into()));
    }
    let reports = par::map_slice(slices, |s| section_report(mask, s, x0, delta, eprime, kernel_basis));
    let mut reports: Vec<CrossSectionReport> = reports.into_iter().collect::<Result<_, _>>()?;
    let x0pp = double_prime(x0, kernel_basis);
    let key = |r: &CrossSectionReport| {
        r.xpp
            .iter()
            .zip(&x0pp)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    reports.sort_by(|a, b| key(a).total_cmp(&key(b)));
    Ok(reports)
}

/// `xpp…,d,t_prime…,closeness,nu…` rows.
pub fn write_cross_sections_csv<W: Write>(
    reports: &[CrossSectionReport],
    n: usize,
    m: usize,
    mut w: W,
) -> io::Result<()> {
    let mut header = Vec::new();
    header.extend(col_names("xpp", n));
    header.push("d".to_string());
    header.extend(col_names("t_prime", m));
    header.push("closeness".into());
    header.extend(col_names("nu", n));
    writeln!(w, "{}", header.join(","))?;
    for r in reports {
        let mut row: Vec<String> = r.xpp.iter().map(|v| format!("{v:.10e}")).collect();
        row.push(format!("{:.10e}", r.d));
        match &r.t_prime {
            Some(t) => row.extend(t.iter().map(|v| format!("{v:.10e}"))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        row.push(r.closeness.map(|c| format!("{c:.10e}")).unwrap_or_default());
        match &r.nu {
            Some(v) => row.extend(v.iter().map(|x| format!("{x:.10e}"))),
            None => row.extend(std::iter::repeat_n(String::new(), n)),
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn col_names(base: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![base.to_string()]
    } else {
        (1..=n).map(|k| format!("{base}_{k}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TipBranch {
    /// `d ~ √(t - tip)`: the regular-tip behaviour.
    SqrtTip,
    /// Difference quotient `d / |t - tip| → 0`: superlinear growth.
    Superlinear,
    /// Constant profile up to resolution; the difference quotient vanishes.
    Flat,
    Mismatch,
}

impl TipBranch {
    /// Whether the profile shows the vanishing-difference-quotient behaviour.
    pub fn is_singular_branch(self) -> bool {
        matches!(self, TipBranch::Superlinear | TipBranch::Flat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterProfile {
    pub samples: Vec<(f64, f64)>,
    pub tip: f64,
    pub exponent: f64,
    pub coefficient: f64,
    /// RMS residual of the log–log line.
    pub fit_rms: f64,
    pub branch: TipBranch,
}

/// Half-width of the exponent window counted as `√` behaviour.
pub const SQRT_EXPONENT_BAND: f64 = 0.15;

fn loglog_fit(pts: &[(f64, f64)], tip: f64) -> Option<(f64, f64, f64)> {
    let xs: Vec<f64> = pts.iter().map(|p| (p.0 - tip).ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    if xs.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - icpt - slope * x).powi(2))
        .sum();
    Some((slope, icpt, (ss / n).sqrt()))
}

/// Zero crossing of the least-squares line through `(t, d²)`.
fn d2_extrapolated_tip(pts: &[(f64, f64)]) -> Option<f64> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1 * p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 * p.1 - my)).sum();
    if sxx <= 0.0 || sxy <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(mx - my / slope)
}

/// Fit `d ≈ coefficient · (t - tip)^exponent` on a profile that grows with `t`.
///
/// The tip is bracketed by the last zero sample below the positive samples
/// (or one profile span below the first positive sample) and chosen to
/// minimize the log–log residual; the `d²` line extrapolation seeds the search.
/// `resolution` is the smallest meaningful change in `d` (one cell diagonal).
pub fn diameter_asymptotics(samples: &[(f64, f64)], resolution: f64) -> Result<DiameterProfile, GeometryError> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positive: Vec<(f64, f64)> = sorted.iter().copied().filter(|p| p.1 > 0.0).collect();
    if positive.len() < 4 {
        return Err(GeometryError::InsufficientData(format!(
            "{} samples with d > 0, need 4",
            positive.len()
        )));
    }
    let first = positive[0].0;
    let last = positive[positive.len() - 1].0;
    let span = last - first;
    let lo = sorted
        .iter()
        .filter(|p| p.1 == 0.0 && p.0 < first)
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = if lo.is_finite() { lo } else { first - span };
    let hi = first - 1e-9 * span.max(1e-300);
    let dmin = positive.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let dmax = positive.iter().map(|p| p.1).fold(0.0, f64::max);
    let flat = dmax - dmin <= resolution;

    let objective = |tip: f64| loglog_fit(&positive, tip).map(|f| f.2).unwrap_or(f64::INFINITY);
    let mut best = (objective(lo.max(hi - span)), lo);
    let steps = 400;
    for k in 0..=steps {
        let tip = lo + (hi - lo) * k as f64 / steps as f64;
        let v = objective(tip);
        if v < best.0 {
            best = (v, tip);
        }
    }
    if let Some(t) = d2_extrapolated_tip(&positive[..positive.len().min(4)]) {
        if t >= lo && t < hi {
            let v = objective(t);
            if v < best.0 {
                best = (v, t);
            }
        }
    }
    // golden-section refinement around the best scan point
    let cell = (hi - lo) / steps as f64;
    let (mut a, mut b) = ((best.1 - cell).max(lo), (best.1 + cell).min(hi));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if objective(c) < objective(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let refined = 0.5 * (a + b);
    if objective(refined) < best.0 {
        best = (objective(refined), refined);
    }
    let tip = best.1;
    let (exponent, icpt, fit_rms) = loglog_fit(&positive, tip)
        .ok_or_else(|| GeometryError::InsufficientData("degenerate log-log fit".into()))?;
    let branch = if flat {
        TipBranch::Flat
    } else if (exponent - 0.5).abs() <= SQRT_EXPONENT_BAND {
        TipBranch::SqrtTip
    } else if exponent > 1.0 {
        TipBranch::Superlinear
    } else {
        TipBranch::Mismatch
    };
    Ok(DiameterProfile {
        samples: sorted,
        tip,
        exponent,
        coefficient: icpt.exp(),
        fit_rms,
        branch,
    })
}

/// SVG of a 2D slice: free-boundary faces plus an optional ellipse overlay.
pub fn slice_svg(section: &Mask, overlay: Option<&Ellipsoid>) -> Result<String, GeometryError> {
    let g = section.grid();
    if g.dim() != 2 {
        return Err(GeometryError::Dimension("SVG export needs a 2D slice".into()));
    }
    let (ox, oy) = (g.origin()[0], g.origin()[1]);
    let (ex, ey) = (g.extent()[0], g.extent()[1]);
    let scale = 512.0 / ex.max(ey);
    let px = |x: f64| (x - ox) * scale;
    let py = |y: f64| (oy + ey - y) * scale;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.3} {:.3}">"#,
        ex * scale,
        ey * scale,
        ex * scale,
        ey * scale
    )
    .unwrap();
    let h = g.spacings();
    writeln!(s, r#"<g stroke="black" stroke-width="1" fill="none">"#).unwrap();
    for p in free_boundary(section) {
        // a face is normal to the axis whose coordinate sits on a cell face
        let on_x = (((p[0] - ox) / h[0]).fract() - 0.0).abs() < 1e-6
            || (((p[0] - ox) / h[0]).fract() - 1.0).abs() < 1e-6;
        let (x1, y1, x2, y2) = if on_x {
            (p[0], p[1] - h[1] / 2.0, p[0], p[1] + h[1] / 2.0)
        } else {
            (p[0] - h[0] / 2.0, p[1], p[0] + h[0] / 2.0, p[1])
        };
        writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
            px(x1),
            py(y1),
            px(x2),
            py(y2)
        )
        .unwrap();
    }
    writeln!(s, "</g>").unwrap();
    if let Some(e) = overlay {
        let pts: Vec<String> = e
            .boundary_samples()
            .iter()
            .map(|q| format!("{:.3},{:.3}", px(q[0]), py(q[1])))
            .collect();
        writeln!(
            s,
            r#"<polygon points="{}" stroke="red" stroke-width="1" fill="none"/>"#,
            pts.join(" ")
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(cells: usize) -> GridSpec {
        GridSpec::cube(2, -1.0, 1.0, cells).unwrap()
    }

    fn cube(cells: usize) -> GridSpec {
        GridSpec::cube(3, -1.0, 1.0, cells).unwrap()
    }

    fn axis3() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0, 1.0]]
    }

    #[test]
    fn mask_of_small_field() {
        let g = square(8);
        let z = ScalarField::zeros(&g);
        assert_eq!(coincidence_mask(&z, 1e-12).count(), g.cell_count());
    }

    #[test]
    fn mask_of_flat_1d_solution() {
        let g = GridSpec::cube(1, -1.0, 1.0, 256).unwrap();
        let h = g.spacing(0);
        let u = ScalarField::sample(&g, |x| ((x[0].abs() - 0.5).max(0.0)).powi(2) / 2.0).unwrap();
        let m = coincidence_mask(&u, h * h / 8.0);
        for i in 0..g.cell_count() {
            let c = g.cell_center(i)[0];
            if c.abs() < 0.5 - h {
                assert!(m.get(i));
            }
            if c.abs() > 0.5 + h {
                assert!(!m.get(i));
            }
        }
    }

    #[test]
    fn mask_of_two_sided_quadratic_is_a_thin_strip() {
        let g = square(64);
        let h = g.spacing(0);
        let u = ScalarField::sample(&g, |x| x[0] * x[0] / 2.0).unwrap();
        let m = coincidence_mask(&u, h * h);
        for i in m.flagged() {
            assert!(g.cell_center(i)[0].abs() < 1.5 * h);
        }
        let per_row = m.count() / g.cells()[1];
        assert!((1..=2).contains(&per_row));
    }

    #[test]
    fn free_boundary_cases() {
        let g = square(32);
        assert!(free_boundary(&Mask::full(&g)).is_empty());
        let mut one = Mask::empty(&g);
        one.set(g.cell_index(&[10, 10]), true);
        assert_eq!(free_boundary(&one).len(), 4);

        let fine = square(256);
        let h = fine.spacing(0);
        let disk = Mask::from_predicate(&fine, |c| c[0] * c[0] + c[1] * c[1] < 0.25);
        let pts = free_boundary(&disk);
        for p in &pts {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 0.5).abs() <= h, "{r}");
        }
        // staircase boundary: 4/π times the perimeter in faces of width h
        let perimeter_cells = 2.0 * std::f64::consts::PI * 0.5 / h;
        let ratio = pts.len() as f64 / perimeter_cells;
        assert!((ratio - 4.0 / std::f64::consts::PI).abs() < 0.2 * 4.0 / std::f64::consts::PI, "{ratio}");
    }

    fn paraboloid(g: &GridSpec, kappa: f64) -> Mask {
        Mask::from_predicate(g, |c| c[2] >= 0.0 && c[0] * c[0] + c[1] * c[1] <= kappa * c[2])
    }

    #[test]
    fn paraboloid_slices() {
        let g = cube(100);
        let h = g.spacing(0);
        let m = paraboloid(&g, 1.0);
        let cs = cross_section(&m, &[0.04], &[0.0; 3], 1.0, &axis3()).unwrap();
        assert!((cs.xpp[0] - 0.05).abs() < 1e-12 || (cs.xpp[0] - 0.03).abs() < 1e-12);
        let r = (cs.xpp[0]).sqrt();
        for j in 0..cs.mask.grid().cell_count() {
            let c = cs.mask.grid().cell_center(j);
            let rr = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert_eq!(cs.mask.get(j), rr <= r, "cell at radius {rr}");
        }
        let d = cs.diameter();
        assert!((d - 2.0 * r).abs() <= 2.0 * cs.mask.grid().cell_diagonal(), "{d}");
        let below = cross_section(&m, &[-0.1], &[0.0; 3], 1.0, &axis3()).unwrap();
        assert!(below.is_empty());
        assert_eq!(below.diameter(), 0.0);
        let _ = h;
    }

    #[test]
    fn paraboloid_diameter_law() {
        let g = cube(96);
        let h = g.spacing(0);
        let m = paraboloid(&g, 0.5);
        let mut t = 4.0 * h;
        while t < 0.9 {
            let cs = cross_section(&m, &[t], &[0.0; 3], 1.0, &axis3()).unwrap();
            let expect = 2.0 * (0.5 * cs.xpp[0]).sqrt();
            assert!((cs.diameter() - expect).abs() <= 2.0 * g.cell_diagonal(), "t={t}");
            t += 0.07;
        }
    }

    #[test]
    fn diameter_examples() {
        let g = square(40);
        let mut m = Mask::empty(&g);
        assert_eq!(mask_diameter(&m), 0.0);
        // centers at x = -0.25 and x = 0.25 on the same row
        m.set(g.cell_index(&[15, 20]), true);
        m.set(g.cell_index(&[25, 20]), true);
        let d = mask_diameter(&m);
        assert!((d - (0.5 + g.cell_diagonal())).abs() < 1e-12, "{d}");
    }

    #[test]
    fn slice_index_set_cases() {
        let g = cube(40);
        let h = g.spacing(2);
        let m = paraboloid(&g, 1.0);
        let layers = slice_index_set(&m, &[0.0; 3], 1.0, &axis3()).unwrap();
        assert!(!layers.is_empty());
        assert!(layers.iter().all(|l| l[0] >= -h));
        assert!(slice_index_set(&Mask::empty(&g), &[0.0; 3], 1.0, &axis3()).unwrap().is_empty());
        let strip = Mask::from_predicate(&g, |c| c[0].abs() < h && c[1].abs() < h);
        assert_eq!(slice_index_set(&strip, &[0.0; 3], 1.0, &axis3()).unwrap().len(), 40);
    }

    #[test]
    fn nu_half_space_and_cylinder() {
        let g = cube(40);
        let half = Mask::from_predicate(&g, |c| c[2] >= 0.0);
        let nu = nu_direction(&half, &[0.0; 3], 0.3, &axis3()).unwrap();
        assert_eq!(nu, vec![-1.0]);
        let cyl = Mask::from_predicate(&g, |c| c[0] * c[0] + c[1] * c[1] <= 0.25);
        let err = nu_direction(&cyl, &[0.5, 0.0, 0.0], 0.3, &axis3()).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateDirection { .. }));
    }

    #[test]
    fn osc_cases() {
        let g = cube(40);
        let half = Mask::from_predicate(&g, |c| c[2] >= 0.0);
        let o = osc_nu(&half, &[0.0, 0.0, 0.0], 0.3, &axis3()).unwrap();
        assert!(o.osc < 1e-12, "{o:?}");
        // two blobs offset in ∓x3 around the query point
        let blobs = Mask::from_predicate(&g, |c| {
            let a = c[0].powi(2) + c[1].powi(2) + (c[2] - 0.3).powi(2) < 0.01;
            let b = c[0].powi(2) + c[1].powi(2) + (c[2] + 0.3).powi(2) < 0.01;
            a || b
        });
        let o = osc_nu(&blobs, &[0.0, 0.0, 0.0], 0.45, &axis3()).unwrap();
        assert!((o.osc - 2.0).abs() < 1e-9, "{o:?}");
    }

    #[test]
    fn ellipse_fits() {
        let g = square(200);
        let h = g.spacing(0);
        let disk = Mask::from_predicate(&g, |c| c[0] * c[0] + c[1] * c[1] <= 0.81);
        let e = fit_ellipsoid(&disk).unwrap();
        assert!(e.center().iter().all(|v| v.abs() < h));
        assert!(e.semi_axes().iter().all(|a| (a - 0.9).abs() < 2.0 * h), "{:?}", e.semi_axes());
        let ell = Mask::from_predicate(&g, |c| (c[0] / 0.4).powi(2) + (c[1] / 0.2).powi(2) <= 1.0);
        let e = fit_ellipsoid(&ell).unwrap();
        assert!((e.semi_axes()[0] - 0.4).abs() < 2.0 * h);
        assert!((e.semi_axes()[1] - 0.2).abs() < 2.0 * h);
        let major = e.axis(0);
        assert!(major[1].atan2(major[0]).abs() < 0.05);
        let mut one = Mask::empty(&g);
        one.set(5, true);
        assert!(matches!(fit_ellipsoid(&one), Err(GeometryError::DegenerateFit(_))));
    }

    #[test]
    fn ellipsoid_round_trip_rotated() {
        let g = square(160);
        let h = g.spacing(0);
        for (ratio, angle) in [(1.0f64, 0.0f64), (2.5, 0.6), (5.0, -1.1)] {
            let a = 0.6;
            let b = a / ratio;
            let (c, s) = (angle.cos(), angle.sin());
            let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            let truth = Ellipsoid::new(vec![0.1, -0.05], vec![a, b], rot).unwrap();
            let m = truth.to_mask(&g).unwrap();
            let e = fit_ellipsoid(&m).unwrap();
            assert!((e.center()[0] - 0.1).abs() < h && (e.center()[1] + 0.05).abs() < h);
            assert!((e.semi_axes()[0] - a).abs() < 2.0 * h);
            assert!((e.semi_axes()[1] - b).abs() < 2.0 * h);
            if ratio > 1.0 {
                let v = e.axis(0);
                let ang = (v[0] * c + v[1] * s).abs().min(1.0).acos();
                assert!(ang < 0.05, "ratio {ratio}: {ang}");
            }
        }
    }

    #[test]
    fn hausdorff_examples() {
        let g = square(128);
        let diag = g.cell_diagonal();
        let a = Mask::from_predicate(&g, |c| c[0] * c[0] + c[1] * c[1] < 0.09);
        let b = Mask::from_predicate(&g, |c| c[0] * c[0] + c[1] * c[1] < 0.25);
        assert_eq!(hausdorff(Shape::Mask(&a), Shape::Mask(&a)).unwrap(), 0.0);
        let d = hausdorff(Shape::Mask(&a), Shape::Mask(&b)).unwrap();
        assert!((d - 0.2).abs() <= diag, "{d}");
        let t = 0.15;
        let c = Mask::from_predicate(&g, |x| (x[0] - t).powi(2) + x[1] * x[1] < 0.09);
        let d = hausdorff(Shape::Mask(&a), Shape::Mask(&c)).unwrap();
        assert!((d - t).abs() <= diag, "{d}");
        assert!(hausdorff(Shape::Mask(&Mask::empty(&g)), Shape::Mask(&a)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn hausdorff_is_a_metric_on_masks(
            fa in proptest::collection::vec(any::<bool>(), 144),
            fb in proptest::collection::vec(any::<bool>(), 144),
            fc in proptest::collection::vec(any::<bool>(), 144),
        ) {
            let g = square(12);
            let a = Mask::from_flags(&g, fa).unwrap();
            let b = Mask::from_flags(&g, fb).unwrap();
            let c = Mask::from_flags(&g, fc).unwrap();
            let ab = hausdorff(Shape::Mask(&a), Shape::Mask(&b));
            let ba = hausdorff(Shape::Mask(&b), Shape::Mask(&a));
            let bc = hausdorff(Shape::Mask(&b), Shape::Mask(&c));
            let ac = hausdorff(Shape::Mask(&a), Shape::Mask(&c));
            if let (Ok(ab), Ok(ba), Ok(bc), Ok(ac)) = (ab, ba, bc, ac) {
                prop_assert_eq!(ab, ba);
                prop_assert!(ac <= ab + bc + 1e-12);
            }
        }
    }

    #[test]
    fn nu_rotation_equivariance() {
        // rotating by 90° in the x′ plane keeps ν″; flipping x3 negates it
        let g = cube(32);
        let base = |c: &[f64]| c[2] > 0.05 - 0.3 * c[0] && c[0] * c[0] + c[1] * c[1] < 0.6;
        let m = Mask::from_predicate(&g, |c| base(c));
        let rot = Mask::from_predicate(&g, |c| base(&[c[1], -c[0], c[2]]));
        let flip = Mask::from_predicate(&g, |c| base(&[c[0], c[1], -c[2]]));
        let x = [0.2, 0.1, 0.0];
        let x_rot = [-0.1, 0.2, 0.0];
        let x_flip = [0.2, 0.1, 0.0];
        let n = nu_direction(&m, &x, 0.4, &axis3()).unwrap();
        let nr = nu_direction(&rot, &x_rot, 0.4, &axis3()).unwrap();
        let nf = nu_direction(&flip, &x_flip, 0.4, &axis3()).unwrap();
        assert_eq!(n, nr);
        assert_eq!(n[0], -nf[0]);
    }

    #[test]
    fn project_slice_cases() {
        let g = cube(40);
        let diag = g.cell_diagonal();
        let half = Mask::from_predicate(&g, |c| c[2] >= 0.0);
        let slab = project_slice(&half, &[0.0; 3], &[1.0], 0.4, &axis3()).unwrap();
        assert!(!slab.is_empty());
        for i in slab.flagged() {
            assert!(g.cell_center(i)[2] <= diag);
        }
        assert!(project_slice(&Mask::empty(&g), &[0.0; 3], &[1.0], 0.4, &axis3()).unwrap().is_empty());
    }

    #[test]
    fn cross_sections_of_exact_paraboloid() {
        let g = cube(96);
        let diag = g.cell_diagonal();
        // {|x′| ≤ √(x3)/2}: sections are disks of diameter √t
        let m = Mask::from_predicate(&g, |c| c[2] >= 0.0 && (c[0] * c[0] + c[1] * c[1]).sqrt() <= c[2].sqrt() / 2.0);
        let eprime = Ellipsoid::ball(vec![0.0, 0.0], 0.5).unwrap();
        let slices: Vec<Vec<f64>> = [0.8, 0.6, 0.4, 0.3].iter().map(|&t| vec![t]).collect();
        let reps = cross_section_convergence(&m, &[0.0; 3], 1.0, &eprime, &slices, &axis3()).unwrap();
        assert_eq!(reps.len(), 4);
        assert!(reps.windows(2).all(|w| w[0].xpp[0].abs() <= w[1].xpp[0].abs()));
        for r in &reps {
            let c = r.closeness.unwrap();
            assert!(c <= 2.0 * diag / r.d, "{r:?}");
        }
        let empty = cross_section_convergence(&m, &[0.0; 3], 1.0, &eprime, &[vec![-0.5]], &axis3()).unwrap();
        assert_eq!(empty[0].d, 0.0);
        assert!(empty[0].closeness.is_none());
    }

    #[test]
    fn asymptotics_synthetic_profiles() {
        let ts = [0.01, 0.02, 0.04, 0.08, 0.16];
        let sq: Vec<_> = ts.iter().map(|&t| (t, 2.0 * f64::sqrt(t))).collect();
        let p = diameter_asymptotics(&sq, 1e-3).unwrap();
        assert!((p.exponent - 0.5).abs() <= 0.02, "{p:?}");
        assert!((p.coefficient - 2.0).abs() <= 0.05, "{p:?}");
        assert_eq!(p.branch, TipBranch::SqrtTip);
        let lin: Vec<_> = ts.iter().map(|&t| (t, t)).collect();
        let p = diameter_asymptotics(&lin, 1e-3).unwrap();
        assert!((p.exponent - 1.0).abs() <= 0.02, "{p:?}");
        assert_eq!(p.branch, TipBranch::Mismatch);
        assert!(diameter_asymptotics(&sq[..3], 1e-3).is_err());
        let flat: Vec<_> = ts.iter().map(|&t| (t, 0.03)).collect();
        let p = diameter_asymptotics(&flat, 0.04).unwrap();
        assert!(p.branch.is_singular_branch());
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_cross_sections_csv(&[], 1, 2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "xpp,d,t_prime_1,t_prime_2,closeness,nu\n");
    }
}
