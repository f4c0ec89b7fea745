//! Agent dynamics: drift and diffusion fields, the spinning-mixture scenario,
//! and Euler–Maruyama simulation of the agent SDE with reflecting walls.
//!
//! Every agent owns a ChaCha8 stream (`rand_chacha::ChaCha8Rng`) seeded from
//! the ensemble seed and selected by the agent index, so trajectories do not
//! depend on how agents are scheduled across threads.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{Bounds, Grid};

/// Name of the generator recorded in run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), seed_from_u64(seed), stream = agent index";

/// Deterministic drift `v(x, t)`.
pub trait VelocityField: Sync {
    fn velocity(&self, x: [f64; 2], t: f64) -> [f64; 2];
}

impl<F> VelocityField for F
where
    F: Fn([f64; 2], f64) -> [f64; 2] + Sync,
{
    fn velocity(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        self(x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantVelocity(pub [f64; 2]);

impl VelocityField for ConstantVelocity {
    fn velocity(&self, _x: [f64; 2], _t: f64) -> [f64; 2] {
        self.0
    }
}

/// Diffusion tensor field `D_ij(x, t) = ½ Σ_k σ_ik σ_jk`.
pub trait DiffusionField: Sync {
    fn tensor(&self, x: [f64; 2], t: f64) -> [[f64; 2]; 2];
}

/// Isotropic noise `σ·I`, giving `D = (σ²/2)·I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    sigma: f64,
}

impl DiffusionModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise amplitude must be positive, got {sigma}"
            )));
        }
        Ok(DiffusionModel { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Diagonal diffusion coefficient `σ²/2`.
    pub fn dcoef(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }
}

impl DiffusionField for DiffusionModel {
    fn tensor(&self, _x: [f64; 2], _t: f64) -> [[f64; 2]; 2] {
        let d = self.dcoef();
        [[d, 0.0], [0.0, d]]
    }
}

/// Two equally weighted isotropic Gaussians whose means spin around the
/// domain center in antiphase. Agents follow `v = D ∇f / f`, i.e. they climb
/// the log-density of the moving mixture, with noise amplitude `D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureScenario {
    pub diffusion: f64,
    pub center: [f64; 2],
    pub radius: f64,
    pub angular_speed: f64,
    pub variance: f64,
}

impl Default for MixtureScenario {
    fn default() -> Self {
        MixtureScenario {
            diffusion: 0.05,
            center: [0.5, 0.5],
            radius: 0.35,
            angular_speed: 0.2,
            variance: 0.015,
        }
    }
}

impl MixtureScenario {
    pub fn with_diffusion(diffusion: f64) -> Self {
        MixtureScenario {
            diffusion,
            ..Default::default()
        }
    }

    pub fn means(&self, t: f64) -> [[f64; 2]; 2] {
        let a = self.angular_speed * t;
        let [cx, cy] = self.center;
        let r = self.radius;
        [
            [cx + r * a.cos(), cy + r * a.sin()],
            [cx + r * (a + PI).cos(), cy + r * (a + PI).sin()],
        ]
    }

    /// Mixture density `f(x, t)` on the plane.
    pub fn density(&self, x: [f64; 2], t: f64) -> f64 {
        let norm = 1.0 / (2.0 * PI * self.variance);
        self.means(t)
            .iter()
            .map(|m| 0.5 * norm * (-sq_dist(x, *m) / (2.0 * self.variance)).exp())
            .sum()
    }

    /// `∇ log f`, evaluated through component responsibilities so it stays
    /// finite far from both means.
    pub fn grad_log_density(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let [m1, m2] = self.means(t);
        let e1 = -sq_dist(x, m1) / (2.0 * self.variance);
        let e2 = -sq_dist(x, m2) / (2.0 * self.variance);
        let top = e1.max(e2);
        let (w1, w2) = ((e1 - top).exp(), (e2 - top).exp());
        let (w1, w2) = (w1 / (w1 + w2), w2 / (w1 + w2));
        let inv = 1.0 / self.variance;
        [
            -inv * (w1 * (x[0] - m1[0]) + w2 * (x[0] - m2[0])),
            -inv * (w1 * (x[1] - m1[1]) + w2 * (x[1] - m2[1])),
        ]
    }

    /// Drift `D ∇f / f`.
    pub fn drift(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let g = self.grad_log_density(x, t);
        [self.diffusion * g[0], self.diffusion * g[1]]
    }

    /// The agents' noise amplitude equals `D`, so the density diffuses with `D²/2`.
    pub fn noise(&self) -> Result<DiffusionModel> {
        DiffusionModel::new(self.diffusion)
    }
}

impl VelocityField for MixtureScenario {
    fn velocity(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        self.drift(x, t)
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Folds `x` back into `[lo, hi]` by repeated specular reflection at the walls.
/// Points already inside are returned unchanged.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    let width = hi - lo;
    let y = (x - lo).rem_euclid(2.0 * width);
    let y = if y > width { 2.0 * width - y } else { y };
    (lo + y).clamp(lo, hi)
}

#[derive(Debug, Clone)]
pub struct AgentEnsemble {
    positions: Vec<[f64; 2]>,
    rngs: Vec<ChaCha8Rng>,
    bounds: Bounds,
    time: f64,
    seed: u64,
}

impl AgentEnsemble {
    /// Draws `n` i.i.d. uniform positions in the grid's domain.
    pub fn uniform(n: usize, grid: &Grid, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one agent".into()));
        }
        let [xmin, xmax, ymin, ymax] = grid.bounds();
        let mut rngs = agent_streams(n, seed);
        let positions = rngs
            .iter_mut()
            .map(|rng| {
                [
                    xmin + (xmax - xmin) * rng.random::<f64>(),
                    ymin + (ymax - ymin) * rng.random::<f64>(),
                ]
            })
            .collect();
        Ok(AgentEnsemble {
            positions,
            rngs,
            bounds: grid.bounds(),
            time: 0.0,
            seed,
        })
    }

    /// Ensemble at given positions; each must lie in the closed domain.
    pub fn from_positions(positions: Vec<[f64; 2]>, grid: &Grid, seed: u64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one agent".into()));
        }
        if let Some(p) = positions.iter().find(|p| !grid.contains(**p)) {
            return Err(Error::InvalidArgument(format!(
                "agent position {p:?} lies outside the domain"
            )));
        }
        let rngs = agent_streams(positions.len(), seed);
        Ok(AgentEnsemble {
            positions,
            rngs,
            bounds: grid.bounds(),
            time: 0.0,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One Euler–Maruyama step `X ← X + v(X,t)·dt + σ·√dt·ξ`, then per-axis
    /// reflection into the domain.
    pub fn step(
        &mut self,
        velocity: &impl VelocityField,
        noise: &DiffusionModel,
        dt: f64,
        exec: Exec,
    ) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let t = self.time;
        let amp = noise.sigma() * dt.sqrt();
        let [xmin, xmax, ymin, ymax] = self.bounds;
        exec.for_each_zip_mut(&mut self.positions, &mut self.rngs, |_, x, rng| {
            let v = velocity.velocity(*x, t);
            let n0: f64 = rng.sample(StandardNormal);
            let n1: f64 = rng.sample(StandardNormal);
            x[0] = reflect(x[0] + v[0] * dt + amp * n0, xmin, xmax);
            x[1] = reflect(x[1] + v[1] * dt + amp * n1, ymin, ymax);
        });
        self.time += dt;
        if self.positions.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::InvalidArgument(
                "agent positions became non-finite; drift not evaluable".into(),
            ));
        }
        Ok(())
    }
}

fn agent_streams(n: usize, seed: u64) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rng
        })
        .collect()
}
