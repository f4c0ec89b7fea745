//! Experiment harness: ground truth, sub-runs over seeds and bandwidths,
//! metrics and output files.
//!
//! Within a sub-run, outer step `k` goes from `t_k` to `t_{k+1}`:
//!
//! 1. the filter takes its step with the measurement `y_k` (the KDE of the
//!    agents at `t_k`) and the generator `A(t_k)`,
//! 2. the agents move to `t_{k+1}` and are re-estimated into `y_{k+1}`,
//! 3. both estimates are compared with the ground truth at `t_{k+1}`.
//!
//! The ground truth is advanced with the same `A(t_k)`, so a zero-gain filter
//! started at the truth reproduces it exactly.

mod config;
mod output;
mod plot;

pub use config::{parse_grid_size, Mode, ScenarioConfig, OUTPUT_DIR_ENV};
pub use output::{
    read_snapshot, write_outputs, write_run_csv, write_snapshot, OutputFiles, SNAPSHOT_HEADER, SUMMARY_COLUMNS,
};
pub use plot::{plot_errors, plot_heatmap, render_plots};

use crate::dynamics::{AgentEnsemble, MixtureScenario};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::filter::{filter_step, oracle_filter_step, FilterConfig, FilterState};
use crate::fpops::{assemble_operator, FpOperator};
use crate::grid::{DensityField, Grid};
use crate::kde::{compute_kbar, kde_on_grid, KdeConfig, NoiseScale};

/// The solved reference density at every outer step, and the generators used.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub fields: Vec<DensityField>,
    pub operators: Vec<FpOperator>,
}

impl GroundTruth {
    pub fn at_step(&self, k: usize) -> &DensityField {
        &self.fields[k]
    }

    pub fn steps(&self) -> usize {
        self.operators.len()
    }
}

/// The benchmark scenario with the configured noise amplitude.
pub fn scenario(cfg: &ScenarioConfig) -> MixtureScenario {
    MixtureScenario::with_diffusion(cfg.diffusion)
}

/// Solves the Fokker-Planck equation from the uniform density, one outer
/// step at a time, keeping the field after every step.
pub fn ground_truth_solve(cfg: &ScenarioConfig, exec: Exec) -> Result<GroundTruth> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let sc = scenario(cfg);
    let noise = sc.noise()?;
    let steps = cfg.steps();
    let [x0, x1, y0, y1] = grid.bounds();
    let mut p = DensityField::constant(grid, 1.0 / ((x1 - x0) * (y1 - y0)), 0.0)?;
    let mut fields = Vec::with_capacity(steps + 1);
    let mut operators = Vec::with_capacity(steps);
    fields.push(p.clone());
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let a = assemble_operator(&grid, &sc, &noise, t, exec)?;
        a.propagate(&mut p, cfg.dt)?;
        p.set_time((k + 1) as f64 * cfg.dt);
        if p.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k + 1,
                what: "ground truth",
            });
        }
        fields.push(p.clone());
        operators.push(a);
    }
    Ok(GroundTruth { fields, operators })
}

/// `sqrt(Σ (a_k − b_k)² dx dy)`.
pub fn l2_error(a: &DensityField, b: &DensityField) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(Error::GridMismatch);
    }
    let s: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s * a.grid().cell_area()).sqrt())
}

/// One row of a run record, at the end of an outer step (or at `t₀`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRow {
    pub time: f64,
    pub l2_error_filter: Option<f64>,
    pub l2_error_kde: f64,
    pub mass_filter: Option<f64>,
    pub mass_kde: f64,
    pub trace_p: Option<f64>,
    /// Smallest cell of the filter estimate; kept in memory only.
    pub min_filter: Option<f64>,
}

/// Fields captured at a snapshot step.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub agents: Vec<[f64; 2]>,
    pub kde: DensityField,
    pub filter: Option<DensityField>,
}

/// Time series and snapshots of one `(seed, bandwidth)` sub-run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub bandwidth: f64,
    pub mode: Mode,
    pub kbar: f64,
    pub rows: Vec<RunRow>,
    pub snapshots: Vec<Snapshot>,
}

impl RunRecord {
    /// Mean errors `(filter, kde)` over rows with `from ≤ time ≤ to`.
    pub fn time_average(&self, from: f64, to: f64) -> (Option<f64>, f64) {
        let eps = 1e-9;
        let rows: Vec<&RunRow> = self
            .rows
            .iter()
            .filter(|r| r.time >= from - eps && r.time <= to + eps)
            .collect();
        let n = rows.len().max(1) as f64;
        let kde = rows.iter().map(|r| r.l2_error_kde).sum::<f64>() / n;
        let filter = if self.mode.has_filter() {
            Some(rows.iter().filter_map(|r| r.l2_error_filter).sum::<f64>() / n)
        } else {
            None
        };
        (filter, kde)
    }
}

/// Per-bandwidth medians over seeds of the time-averaged errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub bandwidth: f64,
    pub median_filter: Option<f64>,
    pub median_kde: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ScenarioConfig,
    pub truth: GroundTruth,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let (from, to) = (self.config.average_from, self.config.t_end);
        self.config
            .bandwidths
            .iter()
            .map(|h| {
                let runs: Vec<&RunRecord> = self.runs.iter().filter(|r| r.bandwidth == *h).collect();
                let avgs: Vec<(Option<f64>, f64)> = runs.iter().map(|r| r.time_average(from, to)).collect();
                let filt: Vec<f64> = avgs.iter().filter_map(|a| a.0).collect();
                SummaryRow {
                    bandwidth: *h,
                    median_filter: (!filt.is_empty()).then(|| median(&filt)),
                    median_kde: median(&avgs.iter().map(|a| a.1).collect::<Vec<_>>()),
                    seeds: runs.len(),
                }
            })
            .collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs every sub-run in memory. Sub-runs are independent and go through
/// `exec` as a unit; each owns its agents and filter.
pub fn simulate(cfg: &ScenarioConfig, exec: Exec) -> Result<ExperimentReport> {
    let truth = ground_truth_solve(cfg, exec)?;
    let subs = cfg.sub_runs();
    // Parallelism goes to the sub-runs when there are several of them.
    let inner = if subs.len() > 1 { Exec::Sequential } else { exec };
    let runs = exec
        .map_indexed(subs.len(), |i| run_single(cfg, &truth, subs[i].0, subs[i].1, inner))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        config: cfg.clone(),
        truth,
        runs,
    })
}

/// [`simulate`] followed by [`write_outputs`] (and plots when configured).
pub fn run_experiment(cfg: &ScenarioConfig, exec: Exec) -> Result<(ExperimentReport, OutputFiles)> {
    let report = simulate(cfg, exec)?;
    let mut files = write_outputs(&report)?;
    if cfg.plots {
        files.plots = render_plots(&cfg.output_dir)?;
    }
    Ok((report, files))
}

/// One sub-run against a precomputed ground truth.
pub fn run_single(cfg: &ScenarioConfig, truth: &GroundTruth, seed: u64, bandwidth: f64, exec: Exec) -> Result<RunRecord> {
    let grid: Grid = cfg.grid()?;
    let sc = scenario(cfg);
    let noise = sc.noise()?;
    let kcfg = KdeConfig::planar(bandwidth)?;
    let kbar: NoiseScale = compute_kbar(cfg.n_agents, &kcfg)?;
    let fcfg = FilterConfig {
        scheme: cfg.scheme,
        renormalize: cfg.renormalize,
        exec,
        ..FilterConfig::default()
    };
    let steps = truth.steps();

    let mut agents = AgentEnsemble::uniform(cfg.n_agents, &grid, seed)?;
    let mut y = kde_on_grid(agents.positions(), &grid, &kcfg, 0.0, exec)?;
    let mut state = match cfg.mode {
        Mode::KdeOnly => None,
        Mode::OpenLoop => Some(FilterState::open_loop(y.clone())),
        Mode::Filter | Mode::Oracle => Some(FilterState::with_scaled_identity(y.clone(), cfg.p0)),
    };

    let mut rows = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::new();
    let record = |k: usize, y: &DensityField, state: &Option<FilterState>| -> Result<RunRow> {
        let p = truth.at_step(k);
        let (lf, mf, tr, mn) = match state {
            Some(s) => (
                Some(l2_error(s.estimate(), p)?),
                Some(s.estimate().integrate()),
                Some(s.covariance().trace()),
                Some(s.estimate().values().iter().copied().fold(f64::INFINITY, f64::min)),
            ),
            None => (None, None, None, None),
        };
        Ok(RunRow {
            time: k as f64 * cfg.dt,
            l2_error_filter: lf,
            l2_error_kde: l2_error(y, p)?,
            mass_filter: mf,
            mass_kde: y.integrate(),
            trace_p: tr,
            min_filter: mn,
        })
    };
    let snap = |k: usize, agents: &AgentEnsemble, y: &DensityField, state: &Option<FilterState>| Snapshot {
        step: k,
        agents: agents.positions().to_vec(),
        kde: y.clone(),
        filter: state.as_ref().map(|s| s.estimate().clone()),
    };
    let wants_snapshot = |k: usize| cfg.snapshot_every > 0 && (k.is_multiple_of(cfg.snapshot_every) || k == steps);

    rows.push(record(0, &y, &state)?);
    if wants_snapshot(0) {
        snapshots.push(snap(0, &agents, &y, &state));
    }
    for k in 0..steps {
        let a = &truth.operators[k];
        if let Some(s) = state.as_mut() {
            let res = match cfg.mode {
                Mode::Oracle => oracle_filter_step(s, a, &y, truth.at_step(k), kbar, cfg.dt, &fcfg),
                _ => filter_step(s, a, &y, kbar, cfg.dt, &fcfg),
            };
            res.map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { step: k + 1, what },
                e => e,
            })?;
        }
        agents.step(&sc, &noise, cfg.dt, exec)?;
        let t = (k + 1) as f64 * cfg.dt;
        y = kde_on_grid(agents.positions(), &grid, &kcfg, t, exec)?;
        rows.push(record(k + 1, &y, &state)?);
        if wants_snapshot(k + 1) {
            snapshots.push(snap(k + 1, &agents, &y, &state));
        }
    }
    Ok(RunRecord {
        seed,
        bandwidth,
        mode: cfg.mode,
        kbar: kbar.value(),
        rows,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(mode: Mode) -> ScenarioConfig {
        ScenarioConfig {
            n_agents: 100,
            nx: 12,
            ny: 12,
            t_end: 2.0,
            average_from: 1.0,
            seeds: vec![3],
            mode,
            snapshot_every: 10,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn l2_examples() {
        let u = Grid::unit_square(10).unwrap();
        let one = DensityField::constant(u, 1.0, 0.0).unwrap();
        let zero = DensityField::constant(u, 0.0, 0.0).unwrap();
        assert_eq!(l2_error(&one, &one).unwrap(), 0.0);
        assert_relative_eq!(l2_error(&one, &zero).unwrap(), 1.0, epsilon = 1e-14);
        let g2 = Grid::new(8, 8, [0.0, 2.0, 0.0, 2.0]).unwrap();
        let two = DensityField::constant(g2, 2.0, 0.0).unwrap();
        let z2 = DensityField::constant(g2, 0.0, 0.0).unwrap();
        assert_relative_eq!(l2_error(&two, &z2).unwrap(), 4.0, epsilon = 1e-14);
        assert!(l2_error(&one, &z2).is_err());
    }

    #[test]
    fn truth_starts_uniform_and_keeps_mass() {
        let cfg = ScenarioConfig {
            t_end: 3.0,
            average_from: 1.0,
            ..ScenarioConfig::default()
        };
        let truth = ground_truth_solve(&cfg, Exec::Parallel).unwrap();
        assert_eq!(truth.fields.len(), 31);
        assert!(truth.fields[0].values().iter().all(|v| *v == 1.0));
        for f in &truth.fields {
            assert!((f.integrate() - 1.0).abs() <= 1e-10);
        }
        assert_relative_eq!(truth.fields[30].time(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn kde_only_has_no_filter_columns() {
        let rep = simulate(&small(Mode::KdeOnly), Exec::Parallel).unwrap();
        let run = &rep.runs[0];
        assert_eq!(run.rows.len(), 21);
        assert!(run.rows.iter().all(|r| r.l2_error_filter.is_none() && r.trace_p.is_none()));
        assert!(run.rows.iter().all(|r| r.l2_error_kde > 0.0));
        assert!(rep.summary()[0].median_filter.is_none());
    }

    #[test]
    fn open_loop_is_the_pde_from_the_first_kde() {
        let cfg = small(Mode::OpenLoop);
        let rep = simulate(&cfg, Exec::Sequential).unwrap();
        let run = &rep.runs[0];
        let grid = cfg.grid().unwrap();
        let agents = AgentEnsemble::uniform(cfg.n_agents, &grid, 3).unwrap();
        let kcfg = KdeConfig::planar(0.05).unwrap();
        let mut p = kde_on_grid(agents.positions(), &grid, &kcfg, 0.0, Exec::Sequential).unwrap();
        for k in 0..cfg.steps() {
            rep.truth.operators[k].propagate(&mut p, cfg.dt).unwrap();
            let want = l2_error(&p, rep.truth.at_step(k + 1)).unwrap();
            assert_eq!(run.rows[k + 1].l2_error_filter, Some(want));
        }
    }

    #[test]
    fn snapshots_follow_the_period() {
        let rep = simulate(&small(Mode::Filter), Exec::Parallel).unwrap();
        let steps: Vec<usize> = rep.runs[0].snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 10, 20]);
        assert!(rep.runs[0].snapshots.iter().all(|s| s.filter.is_some() && s.agents.len() == 100));
    }

    #[test]
    fn time_average_window() {
        let row = |t: f64, e: f64| RunRow {
            time: t,
            l2_error_filter: Some(2.0 * e),
            l2_error_kde: e,
            mass_filter: Some(1.0),
            mass_kde: 1.0,
            trace_p: Some(0.0),
            min_filter: Some(0.0),
        };
        let r = RunRecord {
            seed: 1,
            bandwidth: 0.05,
            mode: Mode::Filter,
            kbar: 0.1,
            rows: vec![row(0.0, 100.0), row(1.0, 1.0), row(2.0, 3.0)],
            snapshots: vec![],
        };
        assert_eq!(r.time_average(1.0, 2.0), (Some(4.0), 2.0));
    }
}
