//! Gaussian kernel density estimation on the grid, and the scale `k̄` of the
//! resulting measurement noise.
//!
//! For `n` samples and bandwidth `h` the estimate at `x` is
//! `f_n(x) = 1/(n h^d) Σ K((x − X_i)/h)` with the standard Gaussian kernel.
//! Its pointwise variance is asymptotically `f(x)·R(K)/(n h^d)` with
//! `R(K) = ∫K²`, so the KDE behaves like the true density plus noise with
//! covariance `k̄·diag(f)`, `k̄ = R(K)/(n h^d)`.
//!
//! No boundary correction is applied: kernels centred near a wall lose part
//! of their mass outside the domain.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{DensityField, Grid};

/// Lower bound applied to densities before they enter a noise covariance.
pub const DENSITY_FLOOR: f64 = 1e-8;

/// Standard Gaussian kernel `(2π)^(−d/2) exp(−uᵀu/2)` in `d = u.len()` dimensions.
pub fn gaussian_kernel(u: &[f64]) -> f64 {
    let r2: f64 = u.iter().map(|x| x * x).sum();
    (2.0 * PI).powf(-(u.len() as f64) / 2.0) * (-0.5 * r2).exp()
}

/// Roughness `∫K(u)² du = (4π)^(−d/2)` of the Gaussian kernel.
pub fn gaussian_roughness(dim: usize) -> f64 {
    (4.0 * PI).powf(-(dim as f64) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    bandwidth: f64,
    dim: usize,
}

impl KdeConfig {
    pub fn new(bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidArgument(format!("dimension must be 1 or 2, got {dim}")));
        }
        Ok(KdeConfig { bandwidth, dim })
    }

    pub fn planar(bandwidth: f64) -> Result<Self> {
        Self::new(bandwidth, 2)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Measurement-noise scale `k̄ = R(K)/(n h^d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale(f64);

impl NoiseScale {
    pub fn new(kbar: f64) -> Result<Self> {
        if !(kbar.is_finite() && kbar > 0.0) {
            return Err(Error::InvalidArgument(format!("noise scale must be positive, got {kbar}")));
        }
        Ok(NoiseScale(kbar))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

pub fn compute_kbar(n: usize, cfg: &KdeConfig) -> Result<NoiseScale> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let scale = n as f64 * cfg.bandwidth.powi(cfg.dim as i32);
    NoiseScale::new(gaussian_roughness(cfg.dim) / scale)
}

/// Planar KDE evaluated at a single point.
pub fn kde_at(samples: &[[f64; 2]], x: [f64; 2], bandwidth: f64) -> f64 {
    let inv = 1.0 / bandwidth;
    let sum: f64 = samples
        .iter()
        .map(|s| gaussian_kernel(&[(x[0] - s[0]) * inv, (x[1] - s[1]) * inv]))
        .sum();
    sum / (samples.len() as f64 * bandwidth * bandwidth)
}

/// Planar KDE at every cell center.
///
/// The Gaussian factorizes over the axes, so per-sample kernel rows along x
/// and y are tabulated once and each cell costs one multiply-add per sample.
/// Each cell's sum runs over samples in input order, independent of `exec`.
/// Values are positive except where every kernel tail underflows.
pub fn kde_on_grid(
    samples: &[[f64; 2]],
    grid: &Grid,
    cfg: &KdeConfig,
    time: f64,
    exec: Exec,
) -> Result<DensityField> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("KDE needs at least one sample".into()));
    }
    if cfg.dim != 2 {
        return Err(Error::Unsupported(format!(
            "grid KDE is planar; configured dimension is {}",
            cfg.dim
        )));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let h = cfg.bandwidth;
    let c = -0.5 / (h * h);
    let ex: Vec<f64> = samples
        .iter()
        .flat_map(|s| (0..nx).map(move |i| (c * (grid.x_center(i) - s[0]).powi(2)).exp()))
        .collect();
    let ey: Vec<f64> = samples
        .iter()
        .flat_map(|s| (0..ny).map(move |j| (c * (grid.y_center(j) - s[1]).powi(2)).exp()))
        .collect();
    let norm = 1.0 / (2.0 * PI * samples.len() as f64 * h * h);

    let mut values = vec![0.0; grid.len()];
    exec.for_each_chunk_mut(&mut values, nx, |j, row| {
        for s in 0..samples.len() {
            let wy = ey[s * ny + j];
            if wy == 0.0 {
                continue;
            }
            let xs = &ex[s * nx..(s + 1) * nx];
            for (r, wx) in row.iter_mut().zip(xs) {
                *r += wy * wx;
            }
        }
        for r in row.iter_mut() {
            *r *= norm;
        }
    });
    DensityField::new(*grid, values, time)
}
