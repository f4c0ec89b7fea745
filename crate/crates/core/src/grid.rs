//! Uniform rectangular discretization of the domain and grid-valued densities.
//!
//! Cells are flattened row-major over y then x: cell `(i, j)` has index
//! `j * nx + i`, with `i` along x. Every matrix and vector in the crate uses
//! this ordering.
//!
//! Quadrature is the midpoint rule (cell value times cell area), exact for
//! piecewise-constant fields and consistent with the finite-volume operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Domain bounds `[xmin, xmax, ymin, ymax]`.
pub type Bounds = [f64; 4];

pub const UNIT_SQUARE: Bounds = [0.0, 1.0, 0.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    nx: usize,
    ny: usize,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    dx: f64,
    dy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, bounds: Bounds) -> Result<Self> {
        let [xmin, xmax, ymin, ymax] = bounds;
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 cells per axis, got {nx}x{ny}"
            )));
        }
        if !bounds.iter().all(|b| b.is_finite()) || xmax <= xmin || ymax <= ymin {
            return Err(Error::InvalidGrid(format!(
                "degenerate bounds {bounds:?}"
            )));
        }
        Ok(Grid {
            nx,
            ny,
            xmin,
            xmax,
            ymin,
            ymax,
            dx: (xmax - xmin) / nx as f64,
            dy: (ymax - ymin) / ny as f64,
        })
    }

    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, UNIT_SQUARE)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn bounds(&self) -> Bounds {
        [self.xmin, self.xmax, self.ymin, self.ymax]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    #[inline]
    pub fn cell(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn x_center(&self, i: usize) -> f64 {
        self.xmin + (i as f64 + 0.5) * self.dx
    }

    #[inline]
    pub fn y_center(&self, j: usize) -> f64 {
        self.ymin + (j as f64 + 0.5) * self.dy
    }

    #[inline]
    pub fn center(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.cell(k);
        [self.x_center(i), self.y_center(j)]
    }

    /// Position of the x-face between cells `i` and `i + 1` (`i + 1` in `1..nx`).
    #[inline]
    pub(crate) fn x_face(&self, i_upper: usize) -> f64 {
        self.xmin + i_upper as f64 * self.dx
    }

    #[inline]
    pub(crate) fn y_face(&self, j_upper: usize) -> f64 {
        self.ymin + j_upper as f64 * self.dy
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        x[0] >= self.xmin && x[0] <= self.xmax && x[1] >= self.ymin && x[1] <= self.ymax
    }

    /// Flattened index of the cell containing `x`, or `None` outside the
    /// closed domain. Points on an interior edge belong to the higher-index
    /// cell; points on the upper boundary belong to the last cell.
    pub fn locate_cell(&self, x: [f64; 2]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let i = axis_cell(x[0], self.xmin, self.xmax, self.nx);
        let j = axis_cell(x[1], self.ymin, self.ymax, self.ny);
        Some(self.index(i, j))
    }

    /// Midpoint-rule integral of raw grid values (which may be signed).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_area()
    }
}

fn axis_cell(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    let s = ((x - lo) * n as f64 / (hi - lo)).floor();
    (s.max(0.0) as usize).min(n - 1)
}

/// Nonnegative grid function: a density, an estimate, or a KDE measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
    time: f64,
}

impl DensityField {
    /// Rejects wrong lengths and negative or non-finite values.
    pub fn new(grid: Grid, values: Vec<f64>, time: f64) -> Result<Self> {
        check_len(&grid, values.len())?;
        if let Some(k) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "density value {} at cell {k} is not a finite nonnegative number",
                values[k]
            )));
        }
        Ok(DensityField { grid, values, time })
    }

    /// Clamps negative entries to zero. Non-finite entries are rejected.
    pub fn clamped(grid: Grid, mut values: Vec<f64>, time: f64) -> Result<Self> {
        check_len(&grid, values.len())?;
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "density value at cell {k} is not finite"
            )));
        }
        for v in &mut values {
            *v = v.max(0.0);
        }
        Ok(DensityField { grid, values, time })
    }

    pub fn constant(grid: Grid, value: f64, time: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()], time)
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: Grid, time: f64, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|k| f(grid.center(k))).collect();
        Self::new(grid, values, time)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, time: f64) {
        self.time = time;
    }

    pub fn integrate(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Scales to unit mass. Leaves an all-zero field unchanged.
    pub fn normalize(&mut self) {
        let mass = self.integrate();
        if mass > 0.0 {
            for v in &mut self.values {
                *v /= mass;
            }
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_grid(&self, other: &DensityField) -> bool {
        self.grid == other.grid
    }
}

fn check_len(grid: &Grid, len: usize) -> Result<()> {
    if len != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            found: len,
        });
    }
    Ok(())
}
