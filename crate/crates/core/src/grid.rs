//! Uniform Cartesian grids on `[-L, L)^d`, grid functions, and the
//! finite-difference Laplacian.
//!
//! Points are cell centered, `x_j = -L + (j + 1/2) h` with `h = 2L/n`, and
//! flat arrays are stored in row-major axis order (last axis fastest).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Zero values outside the grid.
    #[default]
    Dirichlet,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    extent: f64,
    points: usize,
    spacing: f64,
    boundary: Boundary,
}

impl Grid {
    pub fn new(dim: usize, extent: f64, points: usize, boundary: Boundary) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in 1..=3")));
        }
        if points < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 points per axis, got {points}"
            )));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidGrid(format!("extent must be positive, got {extent}")));
        }
        points
            .checked_pow(dim as u32)
            .filter(|&m| m <= isize::MAX as usize / 8)
            .ok_or_else(|| Error::InvalidGrid("grid too large".into()))?;
        Ok(Self {
            dim,
            extent,
            points,
            spacing: 2.0 * extent / points as f64,
            boundary,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Half-width `L` of the domain.
    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Total number of grid points, `n^d`.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight `h^d` carried by every point.
    pub fn weight(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Coordinate of index `j` along any axis.
    pub fn axis_coordinate(&self, j: usize) -> f64 {
        -self.extent + (j as f64 + 0.5) * self.spacing
    }

    pub fn axis_coordinates(&self) -> Vec<f64> {
        (0..self.points).map(|j| self.axis_coordinate(j)).collect()
    }

    /// Stride of `axis` in the flat layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.points.pow((self.dim - 1 - axis) as u32)
    }

    /// Per-axis indices of a flat index; unused axes are zero.
    pub fn multi_index(&self, flat: usize) -> [usize; 3] {
        let mut out = [0; 3];
        let mut rest = flat;
        for axis in (0..self.dim).rev() {
            out[axis] = rest % self.points;
            rest /= self.points;
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi[..self.dim]
            .iter()
            .fold(0, |acc, &j| acc * self.points + j)
    }

    /// Cartesian coordinates of a flat index; unused axes are zero.
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; 3];
        for axis in 0..self.dim {
            x[axis] = self.axis_coordinate(idx[axis]);
        }
        x
    }

    /// Writes `-Δ_h f` into `out`: the `[-1, 2, -1] / h²` stencil along each axis.
    pub fn neg_laplacian_into(&self, f: &[f64], out: &mut [f64]) {
        let n = self.points;
        let m = self.len();
        debug_assert_eq!(f.len(), m);
        debug_assert_eq!(out.len(), m);
        let inv_h2 = 1.0 / (self.spacing * self.spacing);
        let diag = 2.0 * self.dim as f64;
        for (o, &x) in out.iter_mut().zip(f) {
            *o = diag * x;
        }
        let periodic = self.boundary == Boundary::Periodic;
        for axis in 0..self.dim {
            let s = self.stride(axis);
            let block = s * n;
            for base in (0..m).step_by(block) {
                for off in 0..s {
                    let start = base + off;
                    // interior couplings along this line
                    for j in 0..n - 1 {
                        let a = start + j * s;
                        let b = a + s;
                        out[a] -= f[b];
                        out[b] -= f[a];
                    }
                    if periodic {
                        let first = start;
                        let last = start + (n - 1) * s;
                        out[first] -= f[last];
                        out[last] -= f[first];
                    }
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv_h2;
        }
    }

    /// Writes `(-Δ_h + v) f` into `out`.
    pub fn hamiltonian_into(&self, potential: &[f64], f: &[f64], out: &mut [f64]) {
        self.neg_laplacian_into(f, out);
        for ((o, &p), &x) in out.iter_mut().zip(potential).zip(f) {
            *o += p * x;
        }
    }

    /// `h^d Σ f g` on raw slices of this grid.
    pub fn dot(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weight() * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// A real scalar per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "field has {} values, grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    /// Samples `f` at every grid point (coordinates padded with zeros).
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check(&self, other: &Field) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// `∫ f`, i.e. `h^d Σ f`.
    pub fn integral(&self) -> f64 {
        self.grid.weight() * self.values.iter().sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.grid.dot(&self.values, &self.values).sqrt()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check(other)?;
        Ok(Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|x| c * x)
    }

    /// `self + c * other`
    pub fn axpy(&self, c: f64, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn shift(&self, c: f64) -> Field {
        self.map(|x| x + c)
    }
}

/// Applies `-Δ_h` to a field.
pub fn laplacian_apply(grid: &Grid, f: &Field) -> Result<Field> {
    if f.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let mut out = vec![0.0; grid.len()];
    grid.neg_laplacian_into(f.values(), &mut out);
    Field::new(*grid, out)
}

/// Weighted inner product `h^d Σ f g`.
pub fn inner(grid: &Grid, f: &Field, g: &Field) -> Result<f64> {
    if f.grid() != grid || g.grid() != grid {
        return Err(Error::GridMismatch);
    }
    Ok(grid.dot(f.values(), g.values()))
}

/// Default relative floor applied to densities before taking `Δ√ρ / √ρ`.
pub const BOHM_FLOOR: f64 = 1e-12;

/// Bohm potential `Δ_h √ρ̃ / √ρ̃` with `ρ̃ = max(ρ, floor · max ρ)`.
///
/// For a single particle this is the potential whose discrete ground state
/// is exactly `√ρ̃` (with eigenvalue zero).
pub fn bohm_potential(grid: &Grid, rho: &Field, floor: f64) -> Result<Field> {
    if rho.grid() != grid {
        return Err(Error::GridMismatch);
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidInput("density floor must be positive".into()));
    }
    let peak = rho.max();
    if !(peak > 0.0) {
        return Err(Error::InvalidInput("density vanishes identically".into()));
    }
    if rho.values().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidInput("density must be finite and nonnegative".into()));
    }
    let cut = floor * peak;
    let root: Vec<f64> = rho.values().iter().map(|&x| x.max(cut).sqrt()).collect();
    let mut lap = vec![0.0; grid.len()];
    grid.neg_laplacian_into(&root, &mut lap);
    let values = lap.iter().zip(&root).map(|(&l, &s)| -l / s).collect();
    Field::new(*grid, values)
}
