//! Run files: per-run CSV and JSON metadata, snapshot grids, summary.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.toml
//! summary.csv
//! runs/seed{S}_h{H}.csv
//! runs/seed{S}_h{H}.json
//! snapshots/truth/step{K}.txt
//! snapshots/seed{S}_h{H}/step{K}_kde.txt
//! snapshots/seed{S}_h{H}/step{K}_filter.txt
//! snapshots/seed{S}_h{H}/step{K}_agents.csv
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so the CSV files
//! are byte-identical for identical inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use super::{ExperimentReport, RunRecord};
use crate::dynamics::RNG_ALGORITHM;
use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid};

/// Field names of the first line of a snapshot file.
pub const SNAPSHOT_HEADER: &str = "nx ny xmin xmax ymin ymax t";

pub const SUMMARY_COLUMNS: &str = "bandwidth,median_filter,median_kde,seeds";

const FILTER_COLUMNS: &str = "time,l2_error_filter,l2_error_kde,mass_filter,mass_kde,trace_P";
const KDE_COLUMNS: &str = "time,l2_error_kde,mass_kde";

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone, Default)]
pub struct OutputFiles {
    pub config: PathBuf,
    pub summary: PathBuf,
    pub run_csv: Vec<PathBuf>,
    pub metadata: Vec<PathBuf>,
    pub snapshots: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

pub(crate) fn run_stem(seed: u64, bandwidth: f64) -> String {
    format!("seed{seed}_h{bandwidth}")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The run's time series as CSV text.
pub fn write_run_csv(run: &RunRecord) -> String {
    let mut s = String::new();
    if run.mode.has_filter() {
        s.push_str(FILTER_COLUMNS);
        s.push('\n');
        for r in &run.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.time,
                opt(r.l2_error_filter),
                r.l2_error_kde,
                opt(r.mass_filter),
                r.mass_kde,
                opt(r.trace_p)
            );
        }
    } else {
        s.push_str(KDE_COLUMNS);
        s.push('\n');
        for r in &run.rows {
            let _ = writeln!(s, "{},{},{}", r.time, r.l2_error_kde, r.mass_kde);
        }
    }
    s
}

/// Snapshot text: one header line, then one line per grid row `j`, holding
/// the `nx` values of that row in increasing `x`.
pub fn write_snapshot(field: &DensityField) -> String {
    let g = field.grid();
    let [x0, x1, y0, y1] = g.bounds();
    let mut s = format!("{} {} {x0} {x1} {y0} {y1} {}\n", g.nx(), g.ny(), field.time());
    for row in field.values().chunks(g.nx()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_snapshot(path: &Path) -> Result<DensityField> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Parse {
        path: path.to_path_buf(),
        message: m,
    };
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split_whitespace().collect();
    if head.len() != 7 {
        return Err(bad(format!("header needs 7 fields ({SNAPSHOT_HEADER}), found {}", head.len())));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("header: {e}")));
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("header: {e}")));
    let (nx, ny) = (int(head[0])?, int(head[1])?);
    let bounds = [num(head[2])?, num(head[3])?, num(head[4])?, num(head[5])?];
    let t = num(head[6])?;
    let grid = Grid::new(nx, ny, bounds)?;
    let mut values = Vec::with_capacity(grid.len());
    for (i, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            values.push(tok.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
        }
    }
    DensityField::new(grid, values, t).map_err(|e| bad(e.to_string()))
}

fn agents_csv(agents: &[[f64; 2]]) -> String {
    let mut s = String::from("x,y\n");
    for a in agents {
        let _ = writeln!(s, "{},{}", a[0], a[1]);
    }
    s
}

fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = format!("{SUMMARY_COLUMNS}\n");
    for r in report.summary() {
        let _ = writeln!(s, "{},{},{},{}", r.bandwidth, opt(r.median_filter), r.median_kde, r.seeds);
    }
    s
}

fn metadata(report: &ExperimentReport, run: &RunRecord) -> String {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let columns = if run.mode.has_filter() { FILTER_COLUMNS } else { KDE_COLUMNS };
    let v = json!({
        "config": report.config,
        "code_version": env!("CARGO_PKG_VERSION"),
        "rng_algorithm": RNG_ALGORITHM,
        "seed": run.seed,
        "bandwidth": run.bandwidth,
        "kbar": run.kbar,
        "mode": run.mode,
        "steps": run.rows.len() - 1,
        "columns": columns.split(',').collect::<Vec<_>>(),
        "created_unix": created,
    });
    serde_json::to_string_pretty(&v).expect("metadata serializes") + "\n"
}

/// Writes every file of a report under `config.output_dir`.
pub fn write_outputs(report: &ExperimentReport) -> Result<OutputFiles> {
    let out = &report.config.output_dir;
    let mut files = OutputFiles {
        config: out.join("config.toml"),
        summary: out.join("summary.csv"),
        ..OutputFiles::default()
    };
    write_file(&files.config, &report.config.to_toml())?;
    write_file(&files.summary, &summary_csv(report))?;

    let mut truth_steps: Vec<usize> = Vec::new();
    for run in &report.runs {
        let stem = run_stem(run.seed, run.bandwidth);
        let csv = out.join("runs").join(format!("{stem}.csv"));
        write_file(&csv, &write_run_csv(run))?;
        let meta = out.join("runs").join(format!("{stem}.json"));
        write_file(&meta, &metadata(report, run))?;
        files.run_csv.push(csv);
        files.metadata.push(meta);

        let dir = out.join("snapshots").join(&stem);
        for snap in &run.snapshots {
            let k = snap.step;
            let mut put = |name: String, text: String| -> Result<()> {
                let p = dir.join(name);
                write_file(&p, &text)?;
                files.snapshots.push(p);
                Ok(())
            };
            put(format!("step{k:05}_kde.txt"), write_snapshot(&snap.kde))?;
            if let Some(f) = &snap.filter {
                put(format!("step{k:05}_filter.txt"), write_snapshot(f))?;
            }
            put(format!("step{k:05}_agents.csv"), agents_csv(&snap.agents))?;
            if !truth_steps.contains(&k) {
                truth_steps.push(k);
            }
        }
    }
    truth_steps.sort_unstable();
    for k in truth_steps {
        let p = out.join("snapshots").join("truth").join(format!("step{k:05}.txt"));
        write_file(&p, &write_snapshot(report.truth.at_step(k)))?;
        files.snapshots.push(p);
    }
    Ok(files)
}

/// Parses a run CSV back into `(header, rows)`; empty cells become NaN.
pub(crate) fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: "empty file".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse::<f64>() })
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 2),
            })?;
        rows.push(row);
    }
    Ok((header, rows))
}
