//! Static SVG plots rendered from the files of a finished run.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::output::read_csv;
use super::read_snapshot;
use crate::error::{Error, Result};

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

/// Error curves of several run CSVs: KDE solid, filter dashed, one colour
/// per run.
pub fn plot_errors(csvs: &[PathBuf], out: &Path) -> Result<()> {
    let mut series = Vec::new();
    let (mut tmax, mut emax) = (0.0_f64, 0.0_f64);
    for p in csvs {
        let (header, rows) = read_csv(p)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        let t = col("time").ok_or_else(|| plot_err(format!("{}: no time column", p.display())))?;
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let pick = |c: Option<usize>| -> Option<Vec<(f64, f64)>> {
            c.map(|c| rows.iter().map(|r| (r[t], r[c])).filter(|(_, e)| e.is_finite()).collect())
        };
        let kde = pick(col("l2_error_kde")).unwrap_or_default();
        let filt = pick(col("l2_error_filter"));
        for (x, y) in kde.iter().chain(filt.iter().flatten()) {
            tmax = tmax.max(*x);
            emax = emax.max(*y);
        }
        series.push((label, kde, filt));
    }
    if series.is_empty() {
        return Err(Error::Plot("no run files to plot".into()));
    }

    let root = SVGBackend::new(out, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("L2 estimation error (KDE solid, filter dashed)", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..tmax.max(1e-9), 0.0..(1.05 * emax).max(1e-9))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("time")
        .y_desc("L2 error")
        .draw()
        .map_err(plot_err)?;
    for (i, (label, kde, filt)) in series.into_iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(kde, c.stroke_width(1)))
            .map_err(plot_err)?
            .label(format!("{label} kde"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c));
        if let Some(f) = filt {
            chart
                .draw_series(DashedLineSeries::new(f, 6, 4, c.stroke_width(2)))
                .map_err(plot_err)?
                .label(format!("{label} filter"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn viridis_like(u: f64) -> RGBColor {
    let u = u.clamp(0.0, 1.0);
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = u * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    RGBColor(mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Heatmap of one snapshot file, coloured from 0 to `vmax` (or its maximum).
pub fn plot_heatmap(snapshot: &Path, out: &Path, vmax: Option<f64>) -> Result<()> {
    let f = read_snapshot(snapshot)?;
    let g = *f.grid();
    let [x0, x1, y0, y1] = g.bounds();
    let top = vmax.unwrap_or_else(|| f.max_value()).max(1e-12);
    let title = snapshot.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();

    let root = SVGBackend::new(out, (520, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title}  t = {}", f.time()), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().disable_mesh().draw().map_err(plot_err)?;
    let (dx, dy) = (g.dx(), g.dy());
    chart
        .draw_series((0..g.len()).map(|k| {
            let (i, j) = g.cell(k);
            let xl = x0 + i as f64 * dx;
            let yl = y0 + j as f64 * dy;
            let c = viridis_like(f.values()[k] / top);
            Rectangle::new([(xl, yl), (xl + dx, yl + dy)], c.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Renders `errors.svg` from every run CSV and heatmaps of the last
/// snapshot step of the first run, into `dir/plots`.
pub fn render_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = dir.join("runs");
    let mut csvs: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| Error::io(&runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut made = Vec::new();
    let errors = plots.join("errors.svg");
    plot_errors(&csvs, &errors)?;
    made.push(errors);

    let Some(stem) = csvs.first().and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned()) else {
        return Ok(made);
    };
    let snap_dir = dir.join("snapshots").join(&stem);
    let Ok(entries) = fs::read_dir(&snap_dir) else {
        return Ok(made);
    };
    let mut last: Option<String> = None;
    for e in entries.filter_map(|e| e.ok()) {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_suffix("_kde.txt") {
            if last.as_deref().is_none_or(|l| step > l) {
                last = Some(step.to_string());
            }
        }
    }
    let Some(step) = last else {
        return Ok(made);
    };
    let truth = dir.join("snapshots").join("truth").join(format!("{step}.txt"));
    let mut panels = vec![("truth", truth), ("kde", snap_dir.join(format!("{step}_kde.txt")))];
    let filt = snap_dir.join(format!("{step}_filter.txt"));
    if filt.exists() {
        panels.push(("filter", filt));
    }
    // common colour scale across panels
    let mut vmax = 0.0_f64;
    for (_, p) in &panels {
        if p.exists() {
            vmax = vmax.max(read_snapshot(p)?.max_value());
        }
    }
    for (name, p) in panels {
        if p.exists() {
            let out = plots.join(format!("{stem}_{step}_{name}.svg"));
            plot_heatmap(&p, &out, Some(vmax))?;
            made.push(out);
        }
    }
    Ok(made)
}
