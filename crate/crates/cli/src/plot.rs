//! Static SVG figures plus the CSV behind each of them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fcam_core::error::FcamError;
use fcam_core::evaluation::{EvalReport, BOX_SIGMAS};
use plotters::prelude::*;

use crate::error::{CliError, CliResult};
use crate::run::RunDir;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

pub type Series = (String, Vec<(f64, f64)>);

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

/// Line chart with one colored series per entry and a legend.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> CliResult<()> {
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for (_, pts) in series {
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() || x1 <= x0 {
        (x0, x1) = (0.0, 1.0);
    }
    let y1 = if y1 > 0.0 { y1 * 1.05 } else { 1.0 };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, 0.0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Wide CSV: one `x` column, then one column per series (series share x).
pub fn series_csv(x_name: &str, series: &[Series]) -> String {
    let mut s = String::from(x_name);
    for (name, _) in series {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    let n = series.first().map_or(0, |(_, p)| p.len());
    for i in 0..n {
        s.push_str(&series[0].1[i].0.to_string());
        for (_, pts) in series {
            s.push(',');
            s.push_str(&pts.get(i).map(|p| p.1.to_string()).unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

fn box_series(report: &EvalReport, sigma_index: usize) -> Vec<(f64, f64)> {
    let c = &report.box_curves[sigma_index];
    c.taus.iter().copied().zip(c.scores.iter().copied()).collect()
}

fn histogram_series(report: &EvalReport) -> Vec<(f64, f64)> {
    let n = report.histogram.len() as f64;
    report
        .histogram
        .iter()
        .enumerate()
        .map(|(i, &m)| ((i as f64 + 0.5) / n, m))
        .collect()
}

/// Reports stored under `<run>/reports`, keyed by file stem.
pub fn load_reports(run: &RunDir) -> CliResult<BTreeMap<String, EvalReport>> {
    let dir = run.root.join("reports");
    let mut out = BTreeMap::new();
    let Ok(entries) = fs::read_dir(&dir) else {
        return Ok(out);
    };
    for e in entries {
        let path = e.map_err(|source| FcamError::Io { path: dir.clone(), source })?.path();
        if path.extension().is_none_or(|x| x != "json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|source| FcamError::Io { path: path.clone(), source })?;
        if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            out.insert(stem, report);
        }
    }
    Ok(out)
}

/// Split name at the end of a `<method>_<split>` report stem.
fn split_of(stem: &str) -> &str {
    stem.rsplit('_').next().unwrap_or(stem)
}

fn emit(run: &RunDir, name: &str, title: &str, x: &str, y: &str, series: &[Series], out: &mut Vec<PathBuf>) -> CliResult<()> {
    let dir = run.dir("plots")?;
    let svg = dir.join(format!("{name}.svg"));
    line_chart(&svg, title, x, y, series)?;
    out.push(svg);
    out.push(run.write_text(&format!("plots/{name}.csv"), &series_csv(x, series))?);
    Ok(())
}

/// Per-report box-accuracy, precision-recall and histogram figures, plus
/// per-split overlays of the σ = 0.5 curves and histograms of all methods.
pub fn plot(run: &RunDir) -> CliResult<Vec<PathBuf>> {
    let reports = load_reports(run)?;
    if reports.is_empty() {
        return Err(CliError::Usage(format!(
            "no reports under {}; run `eval` first",
            run.root.join("reports").display()
        )));
    }
    let mut out = Vec::new();
    let mut by_split: BTreeMap<String, Vec<(&String, &EvalReport)>> = BTreeMap::new();
    for (stem, r) in &reports {
        by_split.entry(split_of(stem).to_string()).or_default().push((stem, r));
        let curves: Vec<Series> = BOX_SIGMAS
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("sigma_{s}"), box_series(r, i)))
            .collect();
        emit(run, &format!("{stem}_box_acc"), &format!("{stem}: box accuracy"), "tau", "box accuracy", &curves, &mut out)?;
        if let Some(pr) = &r.pr_curve {
            let pts: Vec<(f64, f64)> = pr.recall.iter().copied().zip(pr.precision.iter().copied()).collect();
            emit(run, &format!("{stem}_pr"), &format!("{stem}: precision-recall"), "recall", "precision", &[("precision".into(), pts)], &mut out)?;
        }
        emit(run, &format!("{stem}_histogram"), &format!("{stem}: activations"), "activation", "mass", &[("mass".into(), histogram_series(r))], &mut out)?;
    }
    for (split, items) in &by_split {
        let curves: Vec<Series> = items.iter().map(|(_, r)| (r.method.clone(), box_series(r, 1))).collect();
        emit(run, &format!("tau_sensitivity_{split}"), &format!("box accuracy (sigma 0.5) vs tau, {split}"), "tau", "box accuracy", &curves, &mut out)?;
        let hists: Vec<Series> = items.iter().map(|(_, r)| (r.method.clone(), histogram_series(r))).collect();
        emit(run, &format!("activations_{split}"), &format!("activation distribution, {split}"), "activation", "mass", &hists, &mut out)?;
    }
    let grid = run.root.join("sweep/grid.json");
    if grid.is_file() {
        let text = fs::read_to_string(&grid).map_err(|source| FcamError::Io { path: grid.clone(), source })?;
        let points: Vec<fcam_core::training::GridPoint> = serde_json::from_str(&text).map_err(FcamError::from)?;
        let mut by_alpha: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for p in points {
            by_alpha.entry(format!("alpha_{}", p.alpha)).or_default().push((p.n_minus, p.val_localization));
        }
        let series: Vec<Series> = by_alpha.into_iter().collect();
        emit(run, "n_minus", "validation localization vs n-", "n_minus", "localization", &series, &mut out)?;
    }
    Ok(out)
}
