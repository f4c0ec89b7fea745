//! Scenario configuration: TOML file, defaults, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::RiccatiScheme;
use crate::grid::{Bounds, Grid, UNIT_SQUARE};

/// Environment variable consulted by the CLI for the default output directory.
pub const OUTPUT_DIR_ENV: &str = "DENSFILT_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Suboptimal filter with `R̄` from the KDE.
    #[default]
    Filter,
    /// Raw KDE only; no filter columns.
    KdeOnly,
    /// Filter with `R` from the solved ground truth.
    Oracle,
    /// Zero gain: the PDE started from the first KDE.
    OpenLoop,
}

impl Mode {
    pub fn has_filter(self) -> bool {
        self != Mode::KdeOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Filter => "filter",
            Mode::KdeOnly => "kde-only",
            Mode::Oracle => "oracle",
            Mode::OpenLoop => "open-loop",
        }
    }
}

/// Every field has the benchmark default; a TOML file only lists overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_agents: usize,
    /// Noise amplitude `D` of the agent SDE.
    pub diffusion: f64,
    pub nx: usize,
    pub ny: usize,
    /// `[xmin, xmax, ymin, ymax]`.
    pub bounds: Bounds,
    pub dt: f64,
    pub t_end: f64,
    pub bandwidths: Vec<f64>,
    pub seeds: Vec<u64>,
    pub renormalize: bool,
    pub mode: Mode,
    pub output_dir: PathBuf,
    /// Snapshot period in outer steps; 0 disables snapshots.
    pub snapshot_every: usize,
    /// `P̄(t₀) = p0·I`.
    pub p0: f64,
    pub scheme: RiccatiScheme,
    /// Start of the window for time-averaged errors.
    pub average_from: f64,
    /// Render SVG plots after a run.
    pub plots: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_agents: 300,
            diffusion: 0.05,
            nx: 30,
            ny: 30,
            bounds: UNIT_SQUARE,
            dt: 0.1,
            t_end: 30.0,
            bandwidths: vec![0.05],
            seeds: (1..=5).collect(),
            renormalize: false,
            mode: Mode::Filter,
            output_dir: PathBuf::from("densfilt-out"),
            snapshot_every: 50,
            p0: 1.0,
            scheme: RiccatiScheme::Split,
            average_from: 10.0,
            plots: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.n_agents >= 1, format!("n_agents must be at least 1, got {}", self.n_agents));
        need(
            self.diffusion.is_finite() && self.diffusion > 0.0,
            format!("diffusion must be positive, got {}", self.diffusion),
        );
        need(self.nx >= 3, format!("nx must be at least 3, got {}", self.nx));
        need(self.ny >= 3, format!("ny must be at least 3, got {}", self.ny));
        let [x0, x1, y0, y1] = self.bounds;
        need(
            self.bounds.iter().all(|v| v.is_finite()) && x0 < x1 && y0 < y1,
            format!("bounds must satisfy xmin < xmax and ymin < ymax, got {:?}", self.bounds),
        );
        need(self.dt.is_finite() && self.dt > 0.0, format!("dt must be positive, got {}", self.dt));
        need(
            self.t_end.is_finite() && self.t_end > 0.0,
            format!("t_end must be positive, got {}", self.t_end),
        );
        need(!self.bandwidths.is_empty(), "bandwidths must list at least one value".into());
        for h in &self.bandwidths {
            need(h.is_finite() && *h > 0.0, format!("bandwidths must be positive, got {h}"));
        }
        need(!self.seeds.is_empty(), "seeds must list at least one value".into());
        need(self.p0.is_finite() && self.p0 >= 0.0, format!("p0 must be nonnegative, got {}", self.p0));
        need(
            self.average_from.is_finite() && self.average_from < self.t_end,
            format!("average_from must be below t_end, got {}", self.average_from),
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.nx, self.ny, self.bounds)
    }

    /// Number of outer steps, `t_end/dt` rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }

    /// `(seed, bandwidth)` for every sub-run, seeds outermost.
    pub fn sub_runs(&self) -> Vec<(u64, f64)> {
        self.seeds
            .iter()
            .flat_map(|s| self.bandwidths.iter().map(move |h| (*s, *h)))
            .collect()
    }
}

/// Parses `N` or `NXxNY`.
pub fn parse_grid_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad grid size {s:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}
