//! The density filter on the grid.
//!
//! The estimate `p̂` and covariance `P̄` follow
//!
//! ```text
//! dp̂/dt = A p̂ + L̄ (y − p̂),        L̄ = P̄ R̄⁻¹
//! dP̄/dt = A P̄ + P̄ Aᵀ − P̄ R̄⁻¹ P̄,   R̄ = k̄·diag(max(y, ε))
//! ```
//!
//! with `y` the KDE measurement. Two time discretizations are provided.
//!
//! * [`RiccatiScheme::ExplicitEuler`] integrates both equations with forward
//!   Euler, substepping so that `h·max|A_kk| ≤ 0.9` and
//!   `h·max(P̄_kk/R̄_kk) ≤ 0.9`. The gain is frozen at the step's start.
//!   Where the measured density is near zero, `R̄` is tiny and the second
//!   bound asks for an enormous number of substeps; the step then fails with
//!   [`Error::StiffRiccati`] once `max_substeps` is exceeded.
//! * [`RiccatiScheme::Split`] (the default) first solves the quadratic part
//!   exactly over `dt` with `R̄` frozen,
//!
//!   ```text
//!   P̄⁺ = P̄ − P̄ G½ (I + G½ P̄ G½)⁻¹ G½ P̄,     G = dt·R̄⁻¹
//!   p̂⁺ = p̂ + P̄⁺ G (y − p̂)
//!   ```
//!
//!   (the discrete Kalman update with measurement covariance `R̄/dt`), then
//!   predicts `P̄ ← F P̄ Fᵀ`, `p̂ ← F p̂` with `F = (I + hA)^m`, the same
//!   stable Euler map the ground truth uses. The innovation is taken at the
//!   step's start, so `y = p̂` gives a pure prediction. The scheme agrees
//!   with the ODE to first order in `dt`, keeps `P̄` positive semidefinite
//!   for any `R̄ > 0`, and costs one Cholesky factorization, one triangular
//!   solve and one symmetric rank-n product.
//!
//! The oracle variant replaces `R̄` by `R = k̄·diag(p_true)`; everything else
//! is the same code.

use faer::linalg::matmul::triangular::{self as tri, BlockStructure};
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Accum, Side};
use serde::{Deserialize, Serialize};

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fpops::{stable_substeps, FpOperator, SparseMatrix};
use crate::grid::DensityField;
use crate::kde::{NoiseScale, DENSITY_FLOOR};

/// Diagonal measurement-noise covariance `k̄·diag(max(p, ε))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    diag: Vec<f64>,
    kbar: NoiseScale,
}

impl NoiseCovariance {
    /// Wraps explicit diagonal entries, which must be positive and finite.
    pub fn from_diagonal(diag: Vec<f64>, kbar: NoiseScale) -> Result<Self> {
        if let Some(v) = diag.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "noise covariance entries must be positive, got {v}"
            )));
        }
        Ok(NoiseCovariance { diag, kbar })
    }

    pub fn diag_values(&self) -> &[f64] {
        &self.diag
    }

    pub fn kbar(&self) -> NoiseScale {
        self.kbar
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
}

/// `R = k̄·diag(max(p, ε))`.
pub fn noise_covariance(p_meas: &DensityField, k: NoiseScale) -> NoiseCovariance {
    let kb = k.value();
    let diag = p_meas.values().iter().map(|v| kb * v.max(DENSITY_FLOOR)).collect();
    NoiseCovariance { diag, kbar: k }
}

/// The symmetric covariance matrix `P̄` at a point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceOperator {
    matrix: DenseMatrix,
    time: f64,
}

impl CovarianceOperator {
    /// Symmetrizes the input.
    pub fn new(mut matrix: DenseMatrix, time: f64) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
        }
        matrix.symmetrize();
        Ok(CovarianceOperator { matrix, time })
    }

    pub fn scaled_identity(n: usize, scale: f64, time: f64) -> Self {
        CovarianceOperator {
            matrix: DenseMatrix::scaled_identity(n, scale),
            time,
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    fn is_zero(&self) -> bool {
        self.matrix.data().iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RiccatiScheme {
    ExplicitEuler,
    #[default]
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub scheme: RiccatiScheme,
    /// Rescale `p̂` to unit mass after every step.
    pub renormalize: bool,
    /// Substep cap for the explicit scheme.
    pub max_substeps: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            scheme: RiccatiScheme::Split,
            renormalize: false,
            max_substeps: 10_000,
            exec: Exec::default(),
        }
    }
}

/// Estimate, covariance and step counter of one filter run.
#[derive(Debug, Clone)]
pub struct FilterState {
    estimate: DensityField,
    covariance: CovarianceOperator,
    time: f64,
    steps: usize,
}

impl FilterState {
    pub fn new(estimate: DensityField, covariance: CovarianceOperator) -> Result<Self> {
        if covariance.dim() != estimate.grid().len() {
            return Err(Error::DimensionMismatch {
                expected: estimate.grid().len(),
                found: covariance.dim(),
            });
        }
        let time = estimate.time();
        Ok(FilterState {
            estimate,
            covariance,
            time,
            steps: 0,
        })
    }

    /// `P̄(t₀) = p0·I`.
    pub fn with_scaled_identity(estimate: DensityField, p0: f64) -> Self {
        let n = estimate.grid().len();
        let time = estimate.time();
        FilterState {
            covariance: CovarianceOperator::scaled_identity(n, p0, time),
            estimate,
            time,
            steps: 0,
        }
    }

    /// `P̄ ≡ 0`: the gain is zero forever and the filter is the plain PDE
    /// solver started from `estimate`.
    pub fn open_loop(estimate: DensityField) -> Self {
        Self::with_scaled_identity(estimate, 0.0)
    }

    pub fn estimate(&self) -> &DensityField {
        &self.estimate
    }

    pub fn covariance(&self) -> &CovarianceOperator {
        &self.covariance
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// `L̄ = P̄·diag(1/R_kk)`.
pub fn kalman_gain(p: &CovarianceOperator, r: &NoiseCovariance) -> Result<DenseMatrix> {
    check_dim(p.dim(), r.len())?;
    let n = p.dim();
    let mut l = p.matrix.clone();
    for (col, rk) in l.data_mut().chunks_mut(n).zip(&r.diag) {
        let s = 1.0 / rk;
        col.iter_mut().for_each(|v| *v *= s);
    }
    Ok(l)
}

/// `‖P·(R_a⁻¹ − R_b⁻¹)‖_F`, the distance between the gains built from two
/// noise models on the same covariance.
pub fn gain_distance(p: &CovarianceOperator, ra: &NoiseCovariance, rb: &NoiseCovariance) -> Result<f64> {
    check_dim(p.dim(), ra.len())?;
    check_dim(p.dim(), rb.len())?;
    let n = p.dim();
    let mut acc = 0.0;
    for (j, col) in p.matrix.data().chunks(n).enumerate() {
        let d = 1.0 / ra.diag[j] - 1.0 / rb.diag[j];
        acc += d * d * col.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(acc.sqrt())
}

/// One explicit-Euler step of the Riccati equation over `dt`, substepped.
/// Returns the substep count.
pub fn riccati_step(
    p: &mut CovarianceOperator,
    a: &FpOperator,
    r: &NoiseCovariance,
    dt: f64,
    cfg: &FilterConfig,
) -> Result<usize> {
    check_dt(dt)?;
    let m = riccati_euler(a.matrix(), &mut p.matrix, &r.diag, dt, cfg.max_substeps, cfg.exec)?;
    p.time += dt;
    Ok(m)
}

/// Substep count for the explicit scheme: both the generator bound and the
/// quadratic-term bound `h·max(P_kk/R_kk) ≤ 0.9`.
fn euler_substeps(a: &SparseMatrix, p: &DenseMatrix, r: &[f64], dt: f64, max_substeps: usize) -> Result<usize> {
    let (ma, _) = stable_substeps(dt, a.max_abs_diagonal());
    let ratio = (0..p.dim()).fold(0.0_f64, |m, k| m.max(p.get(k, k) / r[k]));
    let mq = if ratio > 0.0 {
        let est = dt * ratio / crate::fpops::EULER_STABILITY_LIMIT;
        if est.is_nan() || est >= max_substeps as f64 {
            return Err(Error::StiffRiccati {
                required: if est.is_finite() { est.ceil() as usize } else { usize::MAX },
                limit: max_substeps,
            });
        }
        stable_substeps(dt, ratio).0
    } else {
        1
    };
    let m = ma.max(mq);
    if m > max_substeps {
        return Err(Error::StiffRiccati {
            required: m,
            limit: max_substeps,
        });
    }
    Ok(m)
}

/// Explicit Euler on `dP/dt = AP + PAᵀ − P R⁻¹ P` over `dt` on raw matrices.
/// The substep count is fixed from `P` at the start. Returns it.
pub fn riccati_euler(
    a: &SparseMatrix,
    p: &mut DenseMatrix,
    r: &[f64],
    dt: f64,
    max_substeps: usize,
    exec: Exec,
) -> Result<usize> {
    check_dim(p.dim(), a.dim())?;
    check_dim(p.dim(), r.len())?;
    let m = euler_substeps(a, p, r, dt, max_substeps)?;
    let h = dt / m as f64;
    let mut scratch = RiccatiScratch::new(p.dim());
    for _ in 0..m {
        euler_substep(a, p, r, h, &mut scratch, exec);
    }
    Ok(m)
}

struct RiccatiScratch {
    ap: DenseMatrix,
    q: DenseMatrix,
}

impl RiccatiScratch {
    fn new(n: usize) -> Self {
        RiccatiScratch {
            ap: DenseMatrix::zeros(n),
            q: DenseMatrix::zeros(n),
        }
    }
}

fn euler_substep(a: &SparseMatrix, p: &mut DenseMatrix, r: &[f64], h: f64, s: &mut RiccatiScratch, exec: Exec) {
    let n = p.dim();
    a.mul_dense(p, &mut s.ap, exec);
    // q = (P·R⁻¹)·P, lower triangle only
    let mut pr = p.clone();
    for (col, rk) in pr.data_mut().chunks_mut(n).zip(r) {
        let inv = 1.0 / rk;
        col.iter_mut().for_each(|v| *v *= inv);
    }
    tri::matmul(
        s.q.as_faer_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        pr.as_faer(),
        BlockStructure::Rectangular,
        p.as_faer().transpose(),
        BlockStructure::Rectangular,
        1.0,
        exec.faer_par(),
    );
    let ap = s.ap.data();
    let q = s.q.data();
    let pd = p.data_mut();
    for j in 0..n {
        for i in j..n {
            let v = pd[j * n + i] + h * (ap[j * n + i] + ap[i * n + j] - q[j * n + i]);
            pd[j * n + i] = v;
        }
    }
    p.mirror_lower();
}

/// `P ← F P Fᵀ` with `F = (I + hA)^m`; returns `(m, h)`.
fn predict_covariance(a: &FpOperator, p: &mut DenseMatrix, dt: f64, exec: Exec) -> (usize, f64) {
    let (m, h) = a.stable_substep(dt);
    if a.max_diag() == 0.0 {
        return (m, h);
    }
    let mut tmp = DenseMatrix::zeros(p.dim());
    for _ in 0..m {
        a.matrix().euler_congruence(h, p, &mut tmp, exec);
        std::mem::swap(p, &mut tmp);
    }
    p.symmetrize();
    (m, h)
}

/// Exact update of `P` under `dP/dt = −P R⁻¹ P` over `dt` with `R` frozen.
/// Returns `G = dt·R⁻¹` for the estimate correction.
fn information_update(p: &mut DenseMatrix, r: &[f64], dt: f64, exec: Exec) -> Result<Vec<f64>> {
    let n = p.dim();
    let g: Vec<f64> = r.iter().map(|rk| dt / rk).collect();
    let gh: Vec<f64> = g.iter().map(|v| v.sqrt()).collect();
    // W = G½ P, M = I + W G½
    let mut w = p.clone();
    for col in w.data_mut().chunks_mut(n) {
        for (v, s) in col.iter_mut().zip(&gh) {
            *v *= s;
        }
    }
    let mut m = w.clone();
    for (j, col) in m.data_mut().chunks_mut(n).enumerate() {
        let s = gh[j];
        col.iter_mut().for_each(|v| *v *= s);
        col[j] += 1.0;
    }
    let llt = m
        .as_faer()
        .llt(Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    drop(m);
    solve_lower_triangular_in_place(llt.L(), w.as_faer_mut(), exec.faer_par());
    tri::matmul(
        p.as_faer_mut(),
        BlockStructure::TriangularLower,
        Accum::Add,
        w.as_faer().transpose(),
        BlockStructure::Rectangular,
        w.as_faer(),
        BlockStructure::Rectangular,
        -1.0,
        exec.faer_par(),
    );
    p.mirror_lower();
    Ok(g)
}

/// Split step of the Riccati equation on its own, for diagnostics and
/// comparisons with [`riccati_step`].
pub fn riccati_split_step(p: &mut CovarianceOperator, a: &FpOperator, r: &NoiseCovariance, dt: f64, exec: Exec) -> Result<usize> {
    check_dt(dt)?;
    check_dim(p.dim(), a.grid().len())?;
    check_dim(p.dim(), r.len())?;
    information_update(&mut p.matrix, &r.diag, dt, exec)?;
    let (m, _) = predict_covariance(a, &mut p.matrix, dt, exec);
    p.time += dt;
    Ok(m)
}

/// Advances the suboptimal filter by `dt` with `R̄` built from `y`.
pub fn filter_step(
    s: &mut FilterState,
    a: &FpOperator,
    y: &DensityField,
    k: NoiseScale,
    dt: f64,
    cfg: &FilterConfig,
) -> Result<()> {
    let r = noise_covariance(y, k);
    step_with_noise(s, a, y, &r, dt, cfg)
}

/// As [`filter_step`] with the noise covariance built from `p_true`.
pub fn oracle_filter_step(
    s: &mut FilterState,
    a: &FpOperator,
    y: &DensityField,
    p_true: &DensityField,
    k: NoiseScale,
    dt: f64,
    cfg: &FilterConfig,
) -> Result<()> {
    if !p_true.same_grid(y) {
        return Err(Error::GridMismatch);
    }
    let r = noise_covariance(p_true, k);
    step_with_noise(s, a, y, &r, dt, cfg)
}

/// The shared step: any diagonal noise model `r`.
pub fn step_with_noise(
    s: &mut FilterState,
    a: &FpOperator,
    y: &DensityField,
    r: &NoiseCovariance,
    dt: f64,
    cfg: &FilterConfig,
) -> Result<()> {
    check_dt(dt)?;
    let grid = *s.estimate.grid();
    if *y.grid() != grid || *a.grid() != grid {
        return Err(Error::GridMismatch);
    }
    check_dim(grid.len(), r.len())?;
    let exec = cfg.exec;

    if s.covariance.is_zero() {
        // P̄ ≡ 0 stays zero under both schemes and the gain vanishes.
        a.propagate(&mut s.estimate, dt)?;
    } else {
        match cfg.scheme {
            RiccatiScheme::ExplicitEuler => euler_filter(s, a, y, r, dt, cfg)?,
            RiccatiScheme::Split => split_filter(s, a, y, r, dt, exec)?,
        }
        for v in s.estimate.values_mut() {
            *v = v.max(0.0);
        }
    }
    if cfg.renormalize && s.estimate.integrate() > 0.0 {
        s.estimate.normalize();
    }

    s.steps += 1;
    s.time += dt;
    s.estimate.set_time(s.time);
    s.covariance.time = s.time;
    if !s.estimate.values().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            step: s.steps,
            what: "filter estimate",
        });
    }
    if !s.covariance.matrix.is_finite() {
        return Err(Error::NonFinite {
            step: s.steps,
            what: "filter covariance",
        });
    }
    Ok(())
}

fn euler_filter(
    s: &mut FilterState,
    a: &FpOperator,
    y: &DensityField,
    r: &NoiseCovariance,
    dt: f64,
    cfg: &FilterConfig,
) -> Result<()> {
    let n = s.covariance.dim();
    let m = euler_substeps(a.matrix(), &s.covariance.matrix, &r.diag, dt, cfg.max_substeps)?;
    let h = dt / m as f64;
    let gain = kalman_gain(&s.covariance, r)?;

    let x = s.estimate.values_mut();
    let mut ax = vec![0.0; n];
    let mut innov = vec![0.0; n];
    for _ in 0..m {
        a.matrix().mul_vec(x, &mut ax);
        for (d, (yv, xv)) in innov.iter_mut().zip(y.values().iter().zip(x.iter())) {
            *d = yv - xv;
        }
        // ax += L̄ (y − x), column by column
        for (col, d) in gain.data().chunks(n).zip(&innov) {
            if *d != 0.0 {
                for (o, l) in ax.iter_mut().zip(col) {
                    *o += l * d;
                }
            }
        }
        for (xv, rate) in x.iter_mut().zip(&ax) {
            *xv += h * rate;
        }
    }

    let mut scratch = RiccatiScratch::new(n);
    for _ in 0..m {
        euler_substep(a.matrix(), &mut s.covariance.matrix, &r.diag, h, &mut scratch, cfg.exec);
    }
    Ok(())
}

fn split_filter(
    s: &mut FilterState,
    a: &FpOperator,
    y: &DensityField,
    r: &NoiseCovariance,
    dt: f64,
    exec: Exec,
) -> Result<()> {
    let n = s.covariance.dim();
    let g = information_update(&mut s.covariance.matrix, &r.diag, dt, exec)?;

    let x = s.estimate.values_mut();
    let v: Vec<f64> = y
        .values()
        .iter()
        .zip(x.iter())
        .zip(&g)
        .map(|((yv, xv), gk)| gk * (yv - xv))
        .collect();
    if v.iter().any(|d| *d != 0.0) {
        let p = s.covariance.matrix.data();
        let corr = exec.map_indexed(n, |i| {
            // P symmetric: row i equals column i
            p[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
        });
        for (xv, c) in x.iter_mut().zip(corr) {
            *xv += c;
        }
    }

    let (m, h) = predict_covariance(a, &mut s.covariance.matrix, dt, exec);
    let mut scratch = Vec::with_capacity(n);
    for _ in 0..m {
        a.euler_step(s.estimate.values_mut(), h, &mut scratch);
    }
    Ok(())
}

fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")))
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
