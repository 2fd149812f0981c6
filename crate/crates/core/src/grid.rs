//! Structured box grids in one to three dimensions.
//!
//! Fields live on nodes, sets live on cells. A grid with `cells[a]` cells
//! along axis `a` has `cells[a] + 1` nodes along that axis. Flat indices are
//! row-major: the last axis varies fastest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

pub const MAX_DIM: usize = 3;

/// A point in (up to) three dimensions; components past `dim` are zero.
pub type Point = [f64; MAX_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension {0} not supported (expected 1, 2 or 3)")]
    Dimension(usize),
    #[error("axis {axis}: {msg}")]
    Axis { axis: usize, msg: String },
    #[error("spacing aspect ratio {0:.3} exceeds 4")]
    Aspect(f64),
    #[error("non-finite value {value} at node {node} (position {position:?})")]
    NonFinite {
        node: usize,
        position: Vec<f64>,
        value: f64,
    },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("position {0:?} lies outside the grid box")]
    OutOfDomain(Vec<f64>),
    #[error("grids do not match")]
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    origin: Point,
    extent: Point,
    cells: [usize; MAX_DIM],
}

impl GridSpec {
    pub fn new(origin: &[f64], extent: &[f64], cells: &[usize]) -> Result<Self, GridError> {
        let dim = origin.len();
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(GridError::Dimension(dim));
        }
        if extent.len() != dim || cells.len() != dim {
            return Err(GridError::Length {
                expected: dim,
                got: extent.len().min(cells.len()),
            });
        }
        let mut g = GridSpec {
            dim,
            origin: [0.0; MAX_DIM],
            extent: [0.0; MAX_DIM],
            cells: [0; MAX_DIM],
        };
        for a in 0..dim {
            if !origin[a].is_finite() {
                return Err(GridError::Axis {
                    axis: a,
                    msg: "origin must be finite".into(),
                });
            }
            if !(extent[a].is_finite() && extent[a] > 0.0) {
                return Err(GridError::Axis {
                    axis: a,
                    msg: format!("extent must be positive, got {}", extent[a]),
                });
            }
            if cells[a] < 4 {
                return Err(GridError::Axis {
                    axis: a,
                    msg: format!("need at least 4 cells, got {}", cells[a]),
                });
            }
            g.origin[a] = origin[a];
            g.extent[a] = extent[a];
            g.cells[a] = cells[a];
        }
        let ratio = g.h_max() / g.h_min();
        if ratio > 4.0 + 1e-12 {
            return Err(GridError::Aspect(ratio));
        }
        Ok(g)
    }

    /// The cube `[lo, hi]^dim` with `cells` cells per axis.
    pub fn cube(dim: usize, lo: f64, hi: f64, cells: usize) -> Result<Self, GridError> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(GridError::Dimension(dim));
        }
        let origin = vec![lo; dim];
        let extent = vec![hi - lo; dim];
        let c = vec![cells; dim];
        Self::new(&origin, &extent, &c)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.dim]
    }

    pub fn extent(&self) -> &[f64] {
        &self.extent[..self.dim]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    #[inline]
    pub fn spacing(&self, axis: usize) -> f64 {
        self.extent[axis] / self.cells[axis] as f64
    }

    pub fn spacings(&self) -> Point {
        let mut h = [0.0; MAX_DIM];
        for (a, v) in h.iter_mut().enumerate().take(self.dim) {
            *v = self.spacing(a);
        }
        h
    }

    pub fn h_max(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    pub fn h_min(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Upper corner of the box along `axis`.
    pub fn upper(&self, axis: usize) -> f64 {
        self.origin[axis] + self.extent[axis]
    }

    #[inline]
    pub fn nodes(&self, axis: usize) -> usize {
        self.cells[axis] + 1
    }

    pub fn node_count(&self) -> usize {
        (0..self.dim).map(|a| self.nodes(a)).product()
    }

    pub fn cell_count(&self) -> usize {
        (0..self.dim).map(|a| self.cells[a]).product()
    }

    pub fn node_strides(&self) -> [usize; MAX_DIM] {
        let mut s = [0; MAX_DIM];
        let mut acc = 1;
        for a in (0..self.dim).rev() {
            s[a] = acc;
            acc *= self.nodes(a);
        }
        s
    }

    pub fn cell_strides(&self) -> [usize; MAX_DIM] {
        let mut s = [0; MAX_DIM];
        let mut acc = 1;
        for a in (0..self.dim).rev() {
            s[a] = acc;
            acc *= self.cells[a];
        }
        s
    }

    pub fn node_index(&self, multi: &[usize]) -> usize {
        let s = self.node_strides();
        (0..self.dim).map(|a| multi[a] * s[a]).sum()
    }

    pub fn node_multi(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut m = [0; MAX_DIM];
        for a in (0..self.dim).rev() {
            let n = self.nodes(a);
            m[a] = idx % n;
            idx /= n;
        }
        m
    }

    pub fn cell_index(&self, multi: &[usize]) -> usize {
        let s = self.cell_strides();
        (0..self.dim).map(|a| multi[a] * s[a]).sum()
    }

    pub fn cell_multi(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut m = [0; MAX_DIM];
        for a in (0..self.dim).rev() {
            let n = self.cells[a];
            m[a] = idx % n;
            idx /= n;
        }
        m
    }

    pub fn node_position_multi(&self, multi: &[usize]) -> Point {
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.dim {
            p[a] = self.origin[a] + multi[a] as f64 * self.spacing(a);
        }
        p
    }

    pub fn node_position(&self, idx: usize) -> Point {
        self.node_position_multi(&self.node_multi(idx))
    }

    pub fn cell_center_multi(&self, multi: &[usize]) -> Point {
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.dim {
            p[a] = self.origin[a] + (multi[a] as f64 + 0.5) * self.spacing(a);
        }
        p
    }

    pub fn cell_center(&self, idx: usize) -> Point {
        self.cell_center_multi(&self.cell_multi(idx))
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    pub fn cell_diagonal(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.spacing(a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_boundary_node_multi(&self, multi: &[usize]) -> bool {
        (0..self.dim).any(|a| multi[a] == 0 || multi[a] == self.cells[a])
    }

    pub fn is_boundary_node(&self, idx: usize) -> bool {
        self.is_boundary_node_multi(&self.node_multi(idx))
    }

    /// Closed-box membership with a relative slack of `1e-12` of the extent.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() < self.dim {
            return false;
        }
        (0..self.dim).all(|a| {
            let tol = 1e-12 * self.extent[a];
            x[a] >= self.origin[a] - tol && x[a] <= self.upper(a) + tol
        })
    }

    /// Whether the closed ball `B_r(y)` lies inside the box.
    pub fn contains_ball(&self, y: &[f64], r: f64) -> bool {
        (0..self.dim).all(|a| {
            let tol = 1e-12 * self.extent[a];
            y[a] - r >= self.origin[a] - tol && y[a] + r <= self.upper(a) + tol
        })
    }

    /// Multi-index of the cell containing `x` (upper faces belong to the last cell).
    pub fn cell_of(&self, x: &[f64]) -> Option<[usize; MAX_DIM]> {
        if !self.contains(x) {
            return None;
        }
        let mut m = [0; MAX_DIM];
        for a in 0..self.dim {
            let t = ((x[a] - self.origin[a]) / self.spacing(a)).floor();
            m[a] = (t.max(0.0) as usize).min(self.cells[a] - 1);
        }
        Some(m)
    }

    /// Nearest cell layer index along `axis` for coordinate `t`.
    pub fn nearest_layer(&self, axis: usize, t: f64) -> Option<usize> {
        let s = (t - self.origin[axis]) / self.spacing(axis) - 0.5;
        let k = s.round();
        if k < -0.5 || k > self.cells[axis] as f64 - 0.5 {
            return None;
        }
        Some(k as usize)
    }

    /// Grid over a subset of axes, keeping origin, extent and cells.
    pub fn sub_grid(&self, axes: &[usize]) -> Result<GridSpec, GridError> {
        let origin: Vec<f64> = axes.iter().map(|&a| self.origin[a]).collect();
        let extent: Vec<f64> = axes.iter().map(|&a| self.extent[a]).collect();
        let cells: Vec<usize> = axes.iter().map(|&a| self.cells[a]).collect();
        GridSpec::new(&origin, &extent, &cells)
    }

    /// Node grid placed on the cell centers of `self` (one fewer cell per axis).
    pub fn dual(&self) -> Result<GridSpec, GridError> {
        let origin: Vec<f64> = (0..self.dim)
            .map(|a| self.origin[a] + 0.5 * self.spacing(a))
            .collect();
        let extent: Vec<f64> = (0..self.dim)
            .map(|a| self.extent[a] - self.spacing(a))
            .collect();
        let cells: Vec<usize> = (0..self.dim).map(|a| self.cells[a] - 1).collect();
        GridSpec::new(&origin, &extent, &cells)
    }
}

/// Node-indexed real values on a grid. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        ScalarField {
            values: vec![0.0; grid.node_count()],
            grid: grid.clone(),
        }
    }

    pub fn from_values(grid: &GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::Length {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GridError::NonFinite {
                node: i,
                position: grid.node_position(i)[..grid.dim()].to_vec(),
                value: v,
            });
        }
        Ok(ScalarField {
            grid: grid.clone(),
            values,
        })
    }

    /// Evaluate `f` at every node.
    pub fn sample<F>(grid: &GridSpec, f: F) -> Result<Self, GridError>
    where
        F: Fn(&[f64]) -> f64 + Sync + Send,
    {
        let dim = grid.dim();
        let values = par::map_range(grid.node_count(), |i| {
            let p = grid.node_position(i);
            f(&p[..dim])
        });
        Self::from_values(grid, values)
    }

    pub(crate) fn from_raw(grid: &GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, multi: &[usize]) -> f64 {
        self.values[self.grid.node_index(multi)]
    }

    /// Apply `f` nodewise.
    pub fn map<F>(&self, f: F) -> ScalarField
    where
        F: Fn(f64) -> f64 + Sync + Send,
    {
        let values = par::map_slice(&self.values, |&v| f(v));
        ScalarField::from_raw(&self.grid, values)
    }

    pub fn positive_part(&self) -> ScalarField {
        self.map(|v| v.max(0.0))
    }

    pub fn negative_part(&self) -> ScalarField {
        self.map(|v| (-v).max(0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-norm distance to another field on the same grid.
    pub fn max_diff(&self, other: &ScalarField) -> Result<f64, GridError> {
        if self.grid != other.grid {
            return Err(GridError::Mismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Multilinear interpolation from the `2^dim` surrounding nodes.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64, GridError> {
        let g = &self.grid;
        let dim = g.dim();
        let cell = g
            .cell_of(x)
            .ok_or_else(|| GridError::OutOfDomain(x[..dim.min(x.len())].to_vec()))?;
        let mut frac = [0.0; MAX_DIM];
        for a in 0..dim {
            let t = (x[a] - g.origin[a]) / g.spacing(a) - cell[a] as f64;
            frac[a] = t.clamp(0.0, 1.0);
        }
        let strides = g.node_strides();
        let base: usize = (0..dim).map(|a| cell[a] * strides[a]).sum();
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..dim {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx += strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        Ok(acc)
    }

    /// Tensor-product Catmull-Rom interpolation; axes whose four-node stencil
    /// would leave the grid fall back to linear weights. Exact at nodes.
    pub fn interpolate_cubic(&self, x: &[f64]) -> Result<f64, GridError> {
        let g = &self.grid;
        let dim = g.dim();
        let cell = g
            .cell_of(x)
            .ok_or_else(|| GridError::OutOfDomain(x[..dim.min(x.len())].to_vec()))?;
        // per axis: first stencil node and four weights
        let mut start = [0usize; MAX_DIM];
        let mut weights = [[0.0; 4]; MAX_DIM];
        for a in 0..dim {
            let t = ((x[a] - g.origin[a]) / g.spacing(a) - cell[a] as f64).clamp(0.0, 1.0);
            let i = cell[a];
            if i >= 1 && i + 2 <= g.cells[a] {
                let (t2, t3) = (t * t, t * t * t);
                start[a] = i - 1;
                weights[a] = [
                    0.5 * (-t3 + 2.0 * t2 - t),
                    0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
                    0.5 * (-3.0 * t3 + 4.0 * t2 + t),
                    0.5 * (t3 - t2),
                ];
            } else {
                start[a] = i;
                weights[a] = [1.0 - t, t, 0.0, 0.0];
            }
        }
        let strides = g.node_strides();
        let mut acc = 0.0;
        for k in 0..4usize.pow(dim as u32) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut rest = k;
            for a in 0..dim {
                let j = rest % 4;
                rest /= 4;
                w *= weights[a][j];
                if w == 0.0 {
                    break;
                }
                idx += (start[a] + j) * strides[a];
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        Ok(acc)
    }

    /// Average of the corner values of a cell (the multilinear value at its center).
    pub fn cell_center_value(&self, cell: &[usize]) -> f64 {
        let g = &self.grid;
        let dim = g.dim();
        let strides = g.node_strides();
        let base: usize = (0..dim).map(|a| cell[a] * strides[a]).sum();
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut idx = base;
            for (a, s) in strides.iter().enumerate().take(dim) {
                if corner >> a & 1 == 1 {
                    idx += s;
                }
            }
            acc += self.values[idx];
        }
        acc / (1usize << dim) as f64
    }

    /// Values of the `2^dim` corners of a cell.
    pub fn cell_corners(&self, cell: &[usize]) -> impl Iterator<Item = f64> + '_ {
        let g = &self.grid;
        let dim = g.dim();
        let strides = g.node_strides();
        let base: usize = (0..dim).map(|a| cell[a] * strides[a]).sum();
        (0..(1usize << dim)).map(move |corner| {
            let mut idx = base;
            for (a, s) in strides.iter().enumerate().take(dim) {
                if corner >> a & 1 == 1 {
                    idx += s;
                }
            }
            self.values[idx]
        })
    }

    /// Derivative along `axis` at a node: central in the interior,
    /// one-sided second order on the box faces.
    pub fn partial(&self, multi: &[usize], axis: usize) -> f64 {
        let g = &self.grid;
        let s = g.node_strides()[axis];
        let i = g.node_index(multi);
        let h = g.spacing(axis);
        let k = multi[axis];
        let last = g.cells[axis];
        let f = &self.values;
        if k == 0 {
            (-3.0 * f[i] + 4.0 * f[i + s] - f[i + 2 * s]) / (2.0 * h)
        } else if k == last {
            (3.0 * f[i] - 4.0 * f[i - s] + f[i - 2 * s]) / (2.0 * h)
        } else {
            (f[i + s] - f[i - s]) / (2.0 * h)
        }
    }

    pub fn gradient(&self, multi: &[usize]) -> Vec<f64> {
        (0..self.grid.dim())
            .map(|a| self.partial(multi, a))
            .collect()
    }

    /// Nodewise `|∇f|²`.
    pub fn gradient_norm_sq(&self) -> ScalarField {
        let g = &self.grid;
        let values = par::map_range(g.node_count(), |i| {
            let m = g.node_multi(i);
            (0..g.dim()).map(|a| self.partial(&m, a).powi(2)).sum()
        });
        ScalarField::from_raw(g, values)
    }

    /// Nodewise directional derivative `e·∇f`.
    pub fn directional_derivative(&self, e: &[f64]) -> ScalarField {
        let g = &self.grid;
        let values = par::map_range(g.node_count(), |i| {
            let m = g.node_multi(i);
            (0..g.dim()).map(|a| e[a] * self.partial(&m, a)).sum()
        });
        ScalarField::from_raw(g, values)
    }
}

/// Volume of the unit ball in `dim` dimensions.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => unreachable!("dimension checked by GridSpec"),
    }
}

/// `∫_{B_ρ(0)} |x|^{-m} dx` for a ball of volume `volume` in `dim` dimensions.
fn singular_ball_integral(dim: usize, volume: f64, m: f64) -> f64 {
    let w = unit_ball_volume(dim);
    let rho = (volume / w).powf(1.0 / dim as f64);
    let n = dim as f64;
    n * w * rho.powf(n - m) / (n - m)
}

/// `∫_{B_r(y)} g(x) |x - y|^{-m} dx` by the cell-midpoint rule.
///
/// Cells whose centers lie in the ball contribute `g(center)·vol·|center-y|^{-m}`.
/// The cell containing `y` instead uses the exact radial integral of the
/// weight over a ball of one cell volume.
pub fn integrate_ball(g: &ScalarField, y: &[f64], r: f64, m: f64) -> Result<f64, GridError> {
    let grid = g.grid();
    let dim = grid.dim();
    if !(r > 0.0) || !grid.contains_ball(y, r) {
        return Err(GridError::OutOfDomain(y[..dim.min(y.len())].to_vec()));
    }
    let center_cell = grid
        .cell_of(y)
        .ok_or_else(|| GridError::OutOfDomain(y[..dim].to_vec()))?;
    let vol = grid.cell_volume();
    let h = grid.spacings();
    let mut lo = [0usize; MAX_DIM];
    let mut hi = [0usize; MAX_DIM];
    for a in 0..dim {
        let l = ((y[a] - r - grid.origin[a]) / h[a] - 0.5).floor().max(0.0) as usize;
        let u = ((y[a] + r - grid.origin[a]) / h[a] - 0.5).ceil().max(0.0) as usize;
        lo[a] = l.min(grid.cells[a] - 1);
        hi[a] = u.min(grid.cells[a] - 1);
    }
    for a in dim..MAX_DIM {
        lo[a] = 0;
        hi[a] = 0;
    }
    let center_contrib = g.cell_center_value(&center_cell[..dim]) * singular_ball_integral(dim, vol, m);
    let r2 = r * r;
    let slabs = hi[0] - lo[0] + 1;
    let partial = par::sum_range(slabs, |s| {
        let i0 = lo[0] + s;
        let mut acc = 0.0;
        let mut cell = [i0, 0, 0];
        for i1 in lo[1]..=hi[1] {
            cell[1] = i1;
            for i2 in lo[2]..=hi[2] {
                cell[2] = i2;
                if cell[..dim] == center_cell[..dim] {
                    continue;
                }
                let c = grid.cell_center_multi(&cell[..dim]);
                let d2: f64 = (0..dim).map(|a| (c[a] - y[a]).powi(2)).sum();
                if d2 >= r2 {
                    continue;
                }
                let w = if m == 0.0 { 1.0 } else { d2.sqrt().powf(-m) };
                acc += g.cell_center_value(&cell[..dim]) * vol * w;
            }
        }
        acc
    });
    Ok(partial + center_contrib)
}

/// Cell-indexed boolean set on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: GridSpec,
    flags: Vec<bool>,
}

impl Mask {
    pub fn empty(grid: &GridSpec) -> Self {
        Mask {
            grid: grid.clone(),
            flags: vec![false; grid.cell_count()],
        }
    }

    pub fn full(grid: &GridSpec) -> Self {
        Mask {
            grid: grid.clone(),
            flags: vec![true; grid.cell_count()],
        }
    }

    pub fn from_flags(grid: &GridSpec, flags: Vec<bool>) -> Result<Self, GridError> {
        if flags.len() != grid.cell_count() {
            return Err(GridError::Length {
                expected: grid.cell_count(),
                got: flags.len(),
            });
        }
        Ok(Mask {
            grid: grid.clone(),
            flags,
        })
    }

    /// Flag every cell whose center satisfies `pred`.
    pub fn from_predicate<F>(grid: &GridSpec, pred: F) -> Self
    where
        F: Fn(&[f64]) -> bool + Sync + Send,
    {
        let dim = grid.dim();
        let flags = par::map_range(grid.cell_count(), |i| {
            let c = grid.cell_center(i);
            pred(&c[..dim])
        });
        Mask {
            grid: grid.clone(),
            flags,
        }
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.flags[idx]
    }

    pub fn get_multi(&self, multi: &[usize]) -> bool {
        self.flags[self.grid.cell_index(multi)]
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.flags[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.flags.iter().any(|&f| f)
    }

    /// Sum of flagged cell volumes.
    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.grid.cell_volume()
    }

    pub fn flagged(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| if f { Some(i) } else { None })
    }

    /// Whether every face neighbor of a cell exists and is flagged.
    pub fn is_interior_cell(&self, idx: usize) -> bool {
        if !self.flags[idx] {
            return false;
        }
        let g = &self.grid;
        let m = g.cell_multi(idx);
        let s = g.cell_strides();
        (0..g.dim()).all(|a| {
            m[a] > 0 && m[a] + 1 < g.cells[a] && self.flags[idx - s[a]] && self.flags[idx + s[a]]
        })
    }

    /// Flags on the cell-center grid as a 0/1 node field (for snapshots).
    pub fn to_field(&self) -> Result<ScalarField, GridError> {
        let dual = self.grid.dual()?;
        let values = self
            .flags
            .iter()
            .map(|&f| if f { 1.0 } else { 0.0 })
            .collect();
        ScalarField::from_values(&dual, values)
    }
}
