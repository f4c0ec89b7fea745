//! Finite-volume discretization of the Fokker-Planck generator with
//! zero-flux walls.
//!
//! The flux across each interior face combines first-order upwind advection
//! `v·p` with a centered difference of `D·p`. Boundary faces carry no flux at
//! all, which is the discrete reflecting condition. Consequences:
//!
//! * every column of the matrix sums to zero (mass is conserved exactly),
//! * off-diagonal entries are nonnegative (M-matrix structure), so the
//!   forward-Euler map `I + hA` is nonnegative and column-stochastic once
//!   `h·max|A_kk| ≤ 1`,
//! * each row has at most five entries.
//!
//! Upwinding adds numerical diffusion of order `|v|·dx/2`.

use std::io::Write;

use crate::dense::DenseMatrix;
use crate::dynamics::{DiffusionField, VelocityField};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{DensityField, Grid};

/// Forward-Euler substeps are chosen so that `h·max|A_kk|` stays below this.
pub const EULER_STABILITY_LIMIT: f64 = 0.9;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    /// `(offset, a)` with `a[i] = A[i, i+offset]`, when the matrix has few
    /// distinct diagonals. Lets the left product run on contiguous slices.
    bands: Option<Vec<(isize, Vec<f64>)>>,
}

const MAX_BANDS: usize = 9;

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists; columns must be increasing.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for (c, v) in row {
                debug_assert!(c < n);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        let mut m = SparseMatrix {
            n,
            row_ptr,
            col_idx,
            values,
            bands: None,
        };
        m.bands = m.find_bands();
        m
    }

    fn find_bands(&self) -> Option<Vec<(isize, Vec<f64>)>> {
        let mut bands: Vec<(isize, Vec<f64>)> = Vec::new();
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                let off = *c as isize - i as isize;
                let b = match bands.iter().position(|(o, _)| *o == off) {
                    Some(b) => b,
                    None if bands.len() < MAX_BANDS => {
                        bands.push((off, vec![0.0; self.n]));
                        bands.len() - 1
                    }
                    None => return None,
                };
                bands[b].1[i] = *v;
            }
        }
        bands.sort_by_key(|(o, _)| *o);
        Some(bands)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().position(|c| *c == j).map_or(0.0, |p| vals[p])
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.n).map(|i| self.row_ptr[i + 1] - self.row_ptr[i]).max().unwrap_or(0)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for (c, v) in self.col_idx.iter().zip(&self.values) {
            sums[*c] += v;
        }
        sums
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        (0..self.n).fold(0.0, |m, i| m.max(self.get(i, i).abs()))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(c, v)| v * x[*c]).sum();
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                m.set(i, *c, *v);
            }
        }
        m
    }

    /// `dst = src + h·A·src` for square column-major `src`, column by column.
    pub fn euler_left(&self, h: f64, src: &DenseMatrix, dst: &mut DenseMatrix, exec: Exec) {
        let n = self.n;
        assert!(src.dim() == n && dst.dim() == n);
        let src = src.data();
        if let Some(bands) = &self.bands {
            let scaled: Vec<(isize, Vec<f64>)> = bands
                .iter()
                .map(|(o, a)| (*o, a.iter().map(|v| h * v).collect()))
                .collect();
            exec.for_each_chunk_mut(dst.data_mut(), n, |c, out| {
                let x = &src[c * n..(c + 1) * n];
                out.copy_from_slice(x);
                for (off, a) in &scaled {
                    let o = off.unsigned_abs();
                    if o >= n {
                        continue;
                    }
                    let (out, a, x) = if *off >= 0 {
                        (&mut out[..n - o], &a[..n - o], &x[o..])
                    } else {
                        (&mut out[o..], &a[o..], &x[..n - o])
                    };
                    for ((y, a), x) in out.iter_mut().zip(a).zip(x) {
                        *y += a * x;
                    }
                }
            });
            return;
        }
        exec.for_each_chunk_mut(dst.data_mut(), n, |c, out| {
            let x = &src[c * n..(c + 1) * n];
            for (i, o) in out.iter_mut().enumerate() {
                let (cols, vals) = self.row(i);
                let ax: f64 = cols.iter().zip(vals).map(|(k, v)| v * x[*k]).sum();
                *o = x[i] + h * ax;
            }
        });
    }

    /// `dst = src + h·src·Aᵀ`: column `j` of the result mixes the columns of
    /// `src` listed in row `j` of `A`.
    pub fn euler_right_transpose(&self, h: f64, src: &DenseMatrix, dst: &mut DenseMatrix, exec: Exec) {
        let n = self.n;
        assert!(src.dim() == n && dst.dim() == n);
        let src = src.data();
        exec.for_each_chunk_mut(dst.data_mut(), n, |j, out| {
            out.copy_from_slice(&src[j * n..(j + 1) * n]);
            let (cols, vals) = self.row(j);
            for (k, v) in cols.iter().zip(vals) {
                let w = h * v;
                let col = &src[k * n..(k + 1) * n];
                for (o, s) in out.iter_mut().zip(col) {
                    *o += w * s;
                }
            }
        });
    }

    /// `dst = (I + hA)·src·(I + hA)ᵀ` in one pass over `src`.
    ///
    /// Column `k` of `(I + hA)·src` depends on column `k` of `src` only, and
    /// column `j` of the result mixes the columns `j + offset` of that
    /// product. The product columns are therefore streamed through a ring of
    /// `2b + 1` columns, `b` the largest band offset. Parallel blocks
    /// recompute the `b` halo columns on either side.
    pub fn euler_congruence(&self, h: f64, src: &DenseMatrix, dst: &mut DenseMatrix, exec: Exec) {
        let n = self.n;
        assert!(src.dim() == n && dst.dim() == n);
        let Some(bands) = &self.bands else {
            let mut tmp = DenseMatrix::zeros(n);
            self.euler_left(h, src, &mut tmp, exec);
            self.euler_right_transpose(h, &tmp, dst, exec);
            return;
        };
        let scaled: Vec<(isize, Vec<f64>)> = bands
            .iter()
            .map(|(o, a)| (*o, a.iter().map(|v| h * v).collect()))
            .collect();
        let b = bands.iter().map(|(o, _)| o.unsigned_abs()).max().unwrap_or(0).min(n - 1);
        let ring = 2 * b + 1;
        let block = if exec.threads() > 1 {
            n.div_ceil(4 * exec.threads()).max(4 * b + 1)
        } else {
            n
        };
        let src = src.data();
        let left = |k: usize, out: &mut [f64]| {
            let x = &src[k * n..(k + 1) * n];
            out.copy_from_slice(x);
            for (off, a) in &scaled {
                let o = off.unsigned_abs();
                let (out, a, x) = if *off >= 0 {
                    (&mut out[..n - o], &a[..n - o], &x[o..])
                } else {
                    (&mut out[o..], &a[o..], &x[..n - o])
                };
                for ((y, a), x) in out.iter_mut().zip(a).zip(x) {
                    *y += a * x;
                }
            }
        };
        exec.for_each_chunk_mut(dst.data_mut(), block * n, |blk, out| {
            let start = blk * block;
            let end = start + out.len() / n;
            let mut buf = vec![0.0; ring * n];
            let mut next = start.saturating_sub(b);
            for j in start..end {
                while next <= (j + b).min(n - 1) {
                    let slot = next % ring;
                    left(next, &mut buf[slot * n..(slot + 1) * n]);
                    next += 1;
                }
                let col = &mut out[(j - start) * n..(j - start + 1) * n];
                let slot = j % ring;
                col.copy_from_slice(&buf[slot * n..(slot + 1) * n]);
                for (off, a) in &scaled {
                    let k = j as isize + off;
                    if k < 0 || k >= n as isize || a[j] == 0.0 {
                        continue;
                    }
                    let slot = k as usize % ring;
                    let w = a[j];
                    for (y, x) in col.iter_mut().zip(&buf[slot * n..(slot + 1) * n]) {
                        *y += w * x;
                    }
                }
            }
        });
    }

    /// `dst = A·src`.
    pub fn mul_dense(&self, src: &DenseMatrix, dst: &mut DenseMatrix, exec: Exec) {
        let n = self.n;
        assert!(src.dim() == n && dst.dim() == n);
        let src = src.data();
        exec.for_each_chunk_mut(dst.data_mut(), n, |c, out| {
            self.mul_vec(&src[c * n..(c + 1) * n], out);
        });
    }
}

/// Smallest `m` with `(dt_outer/m)·rate ≤ 0.9`, tested with a relative slack
/// of 1e-12 so rounding in `rate` does not add a substep at exact boundaries.
pub fn stable_substeps(dt_outer: f64, rate: f64) -> (usize, f64) {
    let limit = EULER_STABILITY_LIMIT * (1.0 + 1e-12);
    let mut m = ((dt_outer * rate / limit).ceil() as usize).max(1);
    while dt_outer / m as f64 * rate > limit {
        m += 1;
    }
    (m, dt_outer / m as f64)
}

/// Discretized generator `A(t)` on a grid, drift sampled at `time`.
#[derive(Debug, Clone)]
pub struct FpOperator {
    matrix: SparseMatrix,
    grid: Grid,
    time: f64,
    max_diag: f64,
}

impl FpOperator {
    /// The zero generator (no transport). Used for open-loop checks and
    /// decoupled test systems.
    pub fn zero(grid: Grid, time: f64) -> Self {
        let rows = (0..grid.len()).map(|_| Vec::new()).collect();
        FpOperator {
            matrix: SparseMatrix::from_rows(rows),
            grid,
            time,
            max_diag: 0.0,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn max_diag(&self) -> f64 {
        self.max_diag
    }

    /// `A p`; a rate, so entries may be negative.
    pub fn apply(&self, p: &DensityField) -> Result<Vec<f64>> {
        if *p.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        let mut out = vec![0.0; self.grid.len()];
        self.matrix.mul_vec(p.values(), &mut out);
        Ok(out)
    }

    /// Smallest substep count `m` with `(dt_outer/m)·max|A_kk| ≤ 0.9`.
    pub fn stable_substep(&self, dt_outer: f64) -> (usize, f64) {
        stable_substeps(dt_outer, self.max_diag)
    }

    /// One forward-Euler step `p ← p + h·A p` on raw values.
    pub fn euler_step(&self, values: &mut [f64], h: f64, scratch: &mut Vec<f64>) {
        scratch.resize(values.len(), 0.0);
        self.matrix.mul_vec(values, scratch);
        for (v, r) in values.iter_mut().zip(scratch.iter()) {
            *v += h * r;
        }
    }

    /// Advances a density over `dt_outer` with stable forward-Euler substeps.
    /// Returns the number of substeps taken.
    pub fn propagate(&self, p: &mut DensityField, dt_outer: f64) -> Result<usize> {
        if *p.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        let (m, h) = self.stable_substep(dt_outer);
        let mut scratch = Vec::with_capacity(self.grid.len());
        for _ in 0..m {
            self.euler_step(p.values_mut(), h, &mut scratch);
        }
        // The map is nonnegative at this step size; this only removes -0.0 noise.
        for v in p.values_mut() {
            *v = v.max(0.0);
        }
        p.set_time(p.time() + dt_outer);
        Ok(m)
    }

    /// Writes `row col value` lines (0-based) after a `# rows cols nnz time` header.
    pub fn write_coo(&self, mut w: impl Write) -> std::io::Result<()> {
        let n = self.matrix.dim();
        writeln!(w, "# {n} {n} {} {}", self.matrix.nnz(), self.time)?;
        for i in 0..n {
            let (cols, vals) = self.matrix.row(i);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{i} {c} {v:.17e}")?;
            }
        }
        Ok(())
    }
}

/// Assembles `A(t)` from a drift field and a diagonal diffusion field.
///
/// Rows are built independently; each face coefficient is computed by the
/// same expression from both adjacent rows, so column sums cancel to
/// rounding. Cross-diffusion terms are rejected.
pub fn assemble_operator(
    grid: &Grid,
    velocity: &impl VelocityField,
    diffusion: &impl DiffusionField,
    t: f64,
    exec: Exec,
) -> Result<FpOperator> {
    let g = *grid;
    let diag_coef = |k: usize, axis: usize| -> Result<f64> {
        let d = diffusion.tensor(g.center(k), t);
        if d[0][1] != 0.0 || d[1][0] != 0.0 {
            return Err(Error::Unsupported(
                "cross-diffusion terms D_ij with i != j are not assembled".into(),
            ));
        }
        let v = d[axis][axis];
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "diffusion coefficient {v} at cell {k} must be finite and nonnegative"
            )));
        }
        Ok(v)
    };
    // Transfer rates across the face between `lower` and `upper` (upper =
    // lower + 1 along x, lower + nx along y): (lower -> upper, upper -> lower).
    let face = |lower: usize, upper: usize, axis: usize| -> Result<(f64, f64)> {
        let (iu, ju) = g.cell(upper);
        let (x, h) = if axis == 0 {
            ([g.x_face(iu), g.y_center(ju)], g.dx())
        } else {
            ([g.x_center(iu), g.y_face(ju)], g.dy())
        };
        let u = velocity.velocity(x, t)[axis];
        if !u.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "drift is not finite at {x:?}, t = {t}"
            )));
        }
        let up = (u.max(0.0) + diag_coef(lower, axis)? / h) / h;
        let down = ((-u).max(0.0) + diag_coef(upper, axis)? / h) / h;
        Ok((up, down))
    };

    let nx = g.nx();
    let rows = exec.map_indexed(g.len(), |k| -> Result<Vec<(usize, f64)>> {
        let (i, j) = g.cell(k);
        let mut off: Vec<(usize, f64)> = Vec::with_capacity(5);
        let mut out_total = 0.0;
        if j > 0 {
            let (up, down) = face(k - nx, k, 1)?;
            off.push((k - nx, up));
            out_total += down;
        }
        if i > 0 {
            let (up, down) = face(k - 1, k, 0)?;
            off.push((k - 1, up));
            out_total += down;
        }
        let diag_pos = off.len();
        if i + 1 < nx {
            let (up, down) = face(k, k + 1, 0)?;
            off.push((k + 1, down));
            out_total += up;
        }
        if j + 1 < g.ny() {
            let (up, down) = face(k, k + nx, 1)?;
            off.push((k + nx, down));
            out_total += up;
        }
        off.insert(diag_pos, (k, -out_total));
        Ok(off)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let matrix = SparseMatrix::from_rows(rows);
    let max_diag = matrix.max_abs_diagonal();
    Ok(FpOperator {
        matrix,
        grid: g,
        time: t,
        max_diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ConstantVelocity, DiffusionModel, MixtureScenario};
    use proptest::prelude::*;

    const STILL: ConstantVelocity = ConstantVelocity([0.0, 0.0]);

    fn gaussian_field(g: &Grid, c: [f64; 2], var: f64, t: f64) -> DensityField {
        DensityField::from_fn(*g, t, |x| {
            let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            (-r2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var)
        })
        .unwrap()
    }

    #[test]
    fn constant_field_is_stationary_under_pure_diffusion() {
        let g = Grid::unit_square(30).unwrap();
        let a = assemble_operator(&g, &STILL, &DiffusionModel::new(0.3).unwrap(), 0.0, Exec::Sequential)
            .unwrap();
        let rate = a.apply(&DensityField::constant(g, 2.5, 0.0).unwrap()).unwrap();
        assert!(rate.iter().all(|r| r.abs() <= 1e-12));
    }

    #[test]
    fn pure_diffusion_matches_hand_assembled_laplacian() {
        let g = Grid::new(3, 3, [0.0, 3.0, 0.0, 3.0]).unwrap();
        let sigma: f64 = 0.7;
        let d = sigma * sigma / 2.0;
        let a = assemble_operator(&g, &STILL, &DiffusionModel::new(sigma).unwrap(), 0.0, Exec::Sequential)
            .unwrap()
            .matrix()
            .to_dense();

        // Oracle: each pair of edge-adjacent cells exchanges at rate d/dx² = d.
        let mut oracle = [[0.0f64; 9]; 9];
        for k in 0..9usize {
            let (i, j) = (k % 3, k / 3);
            let mut nbrs = vec![];
            if i > 0 { nbrs.push(k - 1); }
            if i < 2 { nbrs.push(k + 1); }
            if j > 0 { nbrs.push(k - 3); }
            if j < 2 { nbrs.push(k + 3); }
            for n in nbrs {
                oracle[k][n] = d;
                oracle[k][k] -= d;
            }
        }
        assert_eq!(oracle[4][4], -2.0 * d * 2.0);
        for r in 0..9 {
            for c in 0..9 {
                assert!((a.get(r, c) - oracle[r][c]).abs() < 1e-15, "({r},{c})");
            }
        }
        assert!(a.max_asymmetry() <= 1e-12);
    }

    #[test]
    fn mixture_operator_structure() {
        let g = Grid::unit_square(30).unwrap();
        let s = MixtureScenario::default();
        for &t in &[0.0, 3.3, 17.0] {
            let a = assemble_operator(&g, &s, &s.noise().unwrap(), t, Exec::Parallel).unwrap();
            let m = a.matrix();
            assert!(m.column_sums().iter().all(|c| c.abs() <= 1e-12));
            assert!(m.max_row_nnz() <= 5);
            for i in 0..m.dim() {
                let (cols, vals) = m.row(i);
                for (c, v) in cols.iter().zip(vals) {
                    if *c != i {
                        assert!(*v >= 0.0);
                    }
                }
            }
            let seq = assemble_operator(&g, &s, &s.noise().unwrap(), t, Exec::Sequential).unwrap();
            assert_eq!(seq.matrix(), m);
        }
    }

    #[test]
    fn rate_integrates_to_zero() {
        let g = Grid::unit_square(30).unwrap();
        let s = MixtureScenario::default();
        let a = assemble_operator(&g, &s, &s.noise().unwrap(), 1.0, Exec::Sequential).unwrap();
        let p = DensityField::from_fn(g, 0.0, |x| 1.0 + (7.0 * x[0]).sin() * (3.0 * x[1]).cos()).unwrap();
        let rate = a.apply(&p).unwrap();
        assert!(g.integrate(&rate).abs() <= 1e-12);
        let other = Grid::unit_square(20).unwrap();
        assert!(a.apply(&DensityField::constant(other, 1.0, 0.0).unwrap()).is_err());
    }

    #[test]
    fn laplacian_of_gaussian_bump() {
        let g = Grid::unit_square(120).unwrap();
        let sigma: f64 = 0.05;
        let d = sigma * sigma / 2.0;
        let peak = g.index(60, 60);
        let c = g.center(peak);
        let var = 0.05f64 * 0.05;
        let p = gaussian_field(&g, c, var, 0.0);
        let a = assemble_operator(&g, &STILL, &DiffusionModel::new(sigma).unwrap(), 0.0, Exec::Sequential)
            .unwrap();
        let rate = a.apply(&p).unwrap();
        // Δ of the Gaussian at its peak: -2/var times the peak value.
        let exact = d * (-2.0 / var) * p.values()[peak];
        assert!(rate[peak] < 0.0);
        assert!(((rate[peak] - exact) / exact).abs() < 0.02);
        let tail = g.index(5, 5);
        assert!(rate[tail] >= -1e-15);
    }

    #[test]
    fn substep_rule() {
        let noise = DiffusionModel::new(0.05).unwrap();
        let build = |n: usize| {
            assemble_operator(&Grid::unit_square(n).unwrap(), &STILL, &noise, 0.0, Exec::Sequential).unwrap()
        };
        let a30 = build(30);
        // Interior diagonal: (σ²/2)·(2/dx² + 2/dy²) = 0.00125·3600.
        assert!((a30.max_diag() - 4.5).abs() < 1e-10);
        assert_eq!(a30.stable_substep(0.1).0, 1);
        let (m, h) = a30.stable_substep(1e-9);
        assert_eq!(m, 1);
        assert_eq!(h, 1e-9);

        let a60 = build(60);
        let a120 = build(120);
        assert!((a60.max_diag() / a30.max_diag() - 4.0).abs() < 1e-10);
        assert!((a120.max_diag() / a60.max_diag() - 4.0).abs() < 1e-10);
        assert_eq!(a60.stable_substep(0.1).0, 2);
        assert_eq!(a120.stable_substep(0.1).0, 8);
        for a in [&a30, &a60, &a120] {
            let (m, h) = a.stable_substep(0.1);
            assert!(h * a.max_diag() <= EULER_STABILITY_LIMIT * (1.0 + 1e-12));
            if m > 1 {
                assert!(0.1 / (m - 1) as f64 * a.max_diag() > EULER_STABILITY_LIMIT);
            }
        }
    }

    #[test]
    fn euler_prediction_conserves_mass_and_positivity() {
        let g = Grid::unit_square(30).unwrap();
        let s = MixtureScenario::default();
        let a = assemble_operator(&g, &s, &s.noise().unwrap(), 4.0, Exec::Sequential).unwrap();
        let (m, h) = a.stable_substep(0.1);
        assert!(m > 1);
        let mut p = DensityField::from_fn(g, 0.0, |x| ((13.0 * x[0] * x[1]).sin() + 1.0).powi(3)).unwrap();
        let mut scratch = Vec::new();
        for _ in 0..200 {
            let before = p.integrate();
            a.euler_step(p.values_mut(), h, &mut scratch);
            assert!((p.integrate() - before).abs() <= 1e-12 * before);
            assert!(p.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn pure_diffusion_converges_at_second_order() {
        let sigma: f64 = 0.05;
        let d = sigma * sigma / 2.0;
        let (var0, c, t_end) = (0.006, [0.5, 0.5], 1.0);
        let errors: Vec<f64> = [30usize, 60, 120]
            .iter()
            .map(|&n| {
                let g = Grid::unit_square(n).unwrap();
                let a = assemble_operator(&g, &STILL, &DiffusionModel::new(sigma).unwrap(), 0.0, Exec::Parallel)
                    .unwrap();
                let mut p = gaussian_field(&g, c, var0, 0.0);
                // Keep h·max|A_kk| fixed so the time error also shrinks like dx².
                let steps = (t_end * a.max_diag() / 0.45).ceil() as usize;
                for _ in 0..steps {
                    a.propagate(&mut p, t_end / steps as f64).unwrap();
                }
                // Free-space heat kernel: variance grows by 2·d·t.
                let exact = gaussian_field(&g, c, var0 + 2.0 * d * t_end, t_end);
                let diff: Vec<f64> = p.values().iter().zip(exact.values()).map(|(a, b)| (a - b).powi(2)).collect();
                g.integrate(&diff).sqrt()
            })
            .collect();
        let rates: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        assert!(rates.iter().all(|r| (1.7..=2.3).contains(r)), "rates {rates:?} errors {errors:?}");
    }

    #[test]
    fn drift_only_transport_moves_center_of_mass() {
        let g = Grid::unit_square(60).unwrap();
        let v = [0.2, 0.1];
        let a = assemble_operator(&g, &ConstantVelocity(v), &DiffusionModel::new(1e-12).unwrap(), 0.0, Exec::Sequential)
            .unwrap();
        let mut p = gaussian_field(&g, [0.35, 0.4], 0.004, 0.0);
        let com = |p: &DensityField| {
            let m = p.integrate();
            let mut c = [0.0, 0.0];
            for (k, val) in p.values().iter().enumerate() {
                let x = g.center(k);
                c[0] += x[0] * val;
                c[1] += x[1] * val;
            }
            [c[0] * g.cell_area() / m, c[1] * g.cell_area() / m]
        };
        let start = com(&p);
        for _ in 0..5 {
            a.propagate(&mut p, 0.1).unwrap();
        }
        let end = com(&p);
        for ax in 0..2 {
            let moved = (end[ax] - start[ax]) / 0.5;
            assert!((moved / v[ax] - 1.0).abs() < 0.05, "axis {ax}: {moved}");
        }
    }

    #[test]
    fn rejects_cross_diffusion() {
        struct Skew;
        impl DiffusionField for Skew {
            fn tensor(&self, _x: [f64; 2], _t: f64) -> [[f64; 2]; 2] {
                [[0.1, 0.02], [0.02, 0.1]]
            }
        }
        let g = Grid::unit_square(5).unwrap();
        let err = assemble_operator(&g, &STILL, &Skew, 0.0, Exec::Sequential).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn dense_kernels_match_dense_products() {
        let g = Grid::unit_square(6).unwrap();
        let s = MixtureScenario::default();
        let a = assemble_operator(&g, &s, &s.noise().unwrap(), 2.0, Exec::Sequential).unwrap();
        let n = g.len();
        let ad = a.matrix().to_dense();
        let x = DenseMatrix::from_fn(n, |i, j| ((i * 31 + j * 17) % 11) as f64 - 5.0);
        let h = 0.003;
        let brute = |i: usize, j: usize, left: bool| -> f64 {
            let s: f64 = if left {
                (0..n).map(|k| ad.get(i, k) * x.get(k, j)).sum()
            } else {
                (0..n).map(|k| x.get(i, k) * ad.get(j, k)).sum()
            };
            x.get(i, j) + h * s
        };
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut out = DenseMatrix::zeros(n);
            a.matrix().euler_left(h, &x, &mut out, exec);
            let mut out2 = DenseMatrix::zeros(n);
            a.matrix().euler_right_transpose(h, &x, &mut out2, exec);
            let mut out3 = DenseMatrix::zeros(n);
            a.matrix().mul_dense(&x, &mut out3, exec);
            for i in 0..n {
                for j in 0..n {
                    assert!((out.get(i, j) - brute(i, j, true)).abs() < 1e-10);
                    assert!((out2.get(i, j) - brute(i, j, false)).abs() < 1e-10);
                    let ax: f64 = (0..n).map(|k| ad.get(i, k) * x.get(k, j)).sum();
                    assert!((out3.get(i, j) - ax).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn congruence_matches_two_pass_product() {
        let g = Grid::unit_square(10).unwrap();
        let s = MixtureScenario::default();
        let a = assemble_operator(&g, &s, &s.noise().unwrap(), 1.0, Exec::Sequential).unwrap();
        let n = g.len();
        let x = DenseMatrix::from_fn(n, |i, j| ((i * 13 + j * 7) % 17) as f64 - 8.0);
        let h = 0.004;
        let mut tmp = DenseMatrix::zeros(n);
        let mut want = DenseMatrix::zeros(n);
        a.matrix().euler_left(h, &x, &mut tmp, Exec::Sequential);
        a.matrix().euler_right_transpose(h, &tmp, &mut want, Exec::Sequential);
        let check = |exec| {
            let mut got = DenseMatrix::zeros(n);
            a.matrix().euler_congruence(h, &x, &mut got, exec);
            assert!(got.frobenius_distance(&want) < 1e-12 * want.frobenius_norm());
            got
        };
        let _seq = check(Exec::Sequential);
        #[cfg(feature = "parallel")]
        {
            // several column blocks with halos
            let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
            let par = pool.install(|| check(Exec::Parallel));
            assert_eq!(par, _seq);
        }
        // a matrix with too many diagonals takes the two-pass route
        let dense_rows = (0..12).map(|i| (0..12).map(|j| (j, 0.1 * (i + j) as f64)).collect()).collect();
        let m = SparseMatrix::from_rows(dense_rows);
        let y = DenseMatrix::from_fn(12, |i, j| (i + 2 * j) as f64);
        let (mut t1, mut t2, mut got) = (DenseMatrix::zeros(12), DenseMatrix::zeros(12), DenseMatrix::zeros(12));
        m.euler_left(h, &y, &mut t1, Exec::Sequential);
        m.euler_right_transpose(h, &t1, &mut t2, Exec::Sequential);
        m.euler_congruence(h, &y, &mut got, Exec::Sequential);
        assert_eq!(got, t2);
    }

    #[test]
    fn coo_dump_lists_every_entry() {
        let g = Grid::unit_square(4).unwrap();
        let s = MixtureScenario::default();
        let a = assemble_operator(&g, &s, &s.noise().unwrap(), 0.0, Exec::Sequential).unwrap();
        let mut buf = Vec::new();
        a.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("# 16 16 {} 0", a.matrix().nnz()));
        let mut count = 0;
        for l in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            let (r, c, v): (usize, usize, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
            assert_eq!(v, a.matrix().get(r, c));
            count += 1;
        }
        assert_eq!(count, a.matrix().nnz());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn column_sums_vanish_for_any_drift(
            a0 in -3.0f64..3.0, a1 in -3.0f64..3.0, w in 0.5f64..12.0, sigma in 0.001f64..0.5, n in 3usize..25,
        ) {
            let g = Grid::new(n, n + 2, [0.0, 1.0, -0.5, 1.0]).unwrap();
            let v = move |x: [f64; 2], t: f64| [a0 * (w * x[1] + t).sin(), a1 * (w * x[0]).cos()];
            let op = assemble_operator(&g, &v, &DiffusionModel::new(sigma).unwrap(), 0.3, Exec::Sequential).unwrap();
            let scale = op.max_diag().max(1.0);
            for s in op.matrix().column_sums() {
                prop_assert!(s.abs() <= 1e-12 * scale);
            }
            prop_assert!(op.matrix().max_row_nnz() <= 5);
        }
    }
}
