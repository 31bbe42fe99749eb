//! SVG figures from run directories: loss curves, validation accuracy and
//! per-epoch mask-count histograms.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::train::{read_diagnostics, read_metrics, EpochDiagnostics, MetricsRow, TrainConfig};

struct RunSeries {
    label: String,
    rows: Vec<MetricsRow>,
    diags: Vec<EpochDiagnostics>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn load_run(dir: &Path) -> Result<Option<RunSeries>> {
    let metrics = dir.join("metrics.csv");
    if !metrics.exists() {
        log::warn!("{} has no metrics.csv, skipping", dir.display());
        return Ok(None);
    }
    let rows = read_metrics(&metrics)?;
    if rows.is_empty() {
        log::warn!("{} is empty, skipping", metrics.display());
        return Ok(None);
    }
    let dir_name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let label = match fs::read(dir.join("config.json")) {
        Ok(bytes) => match serde_json::from_slice::<TrainConfig>(&bytes) {
            Ok(c) if c.method.name() != dir_name => format!("{} ({dir_name})", c.method.name()),
            Ok(c) => c.method.name().to_string(),
            Err(_) => dir_name,
        },
        Err(_) => dir_name,
    };
    Ok(Some(RunSeries {
        label,
        rows,
        diags: read_diagnostics(&dir.join("diagnostics.jsonl"))?,
    }))
}

fn line_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<bool> {
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        return Ok(false);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(true)
}

fn mask_histogram(path: &Path, run: &RunSeries) -> Result<bool> {
    let diags: Vec<&EpochDiagnostics> = run
        .diags
        .iter()
        .filter(|d| d.mask_histogram.iter().any(|&c| c > 0))
        .collect();
    if diags.is_empty() {
        return Ok(false);
    }
    let bins = diags.iter().map(|d| d.mask_histogram.len()).max().unwrap_or(1);
    let frac = |d: &EpochDiagnostics, c: usize| {
        let total: usize = d.mask_histogram.iter().sum();
        d.mask_histogram.get(c).copied().unwrap_or(0) as f64 / total.max(1) as f64
    };
    let y_max = diags
        .iter()
        .flat_map(|d| (0..bins).map(move |c| frac(d, c)))
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("mask count per sample: {}", run.label), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5..(bins as f64 - 0.5), 0.0..y_max * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("masked joints")
        .y_desc("fraction of samples")
        .draw()
        .map_err(plot_err)?;
    let n = diags.len();
    for (i, d) in diags.iter().enumerate() {
        // Early epochs pale, late epochs saturated.
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 1.0 };
        let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
        let color = RGBColor(mix(170, 8), mix(200, 48), mix(235, 107)).to_rgba();
        chart
            .draw_series(LineSeries::new(
                (0..bins).map(|c| (c as f64, frac(d, c))),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(format!("epoch {}", d.epoch))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if n <= 12 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(true)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `loss.svg`, `ap.svg` and one `mask_hist_<run>.svg` per masking run
/// into `out_dir`. Runs without metrics are skipped with a warning. Returns
/// the files written.
pub fn emit_plots(runs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut loaded = Vec::new();
    for dir in runs {
        if let Some(r) = load_run(dir)? {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            loaded.push((name, r));
        }
    }
    if loaded.is_empty() {
        log::warn!("no runs with metrics; nothing to plot");
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let series = |f: fn(&MetricsRow) -> Option<f64>| -> Vec<(String, Vec<(f64, f64)>)> {
        loaded
            .iter()
            .map(|(_, r)| {
                let pts = r.rows.iter().filter_map(|row| f(row).map(|v| (row.epoch as f64, v))).collect();
                (r.label.clone(), pts)
            })
            .collect()
    };
    let loss = out_dir.join("loss.svg");
    if line_chart(&loss, "training loss", "total loss", &series(|r| r.l_total))? {
        written.push(loss);
    }
    let ap_series = series(|r| r.ap);
    let ap = out_dir.join("ap.svg");
    if line_chart(&ap, "validation AP", "AP", &ap_series)? {
        written.push(ap);
    }
    let pck = out_dir.join("pck.svg");
    if line_chart(&pck, "validation PCK", "PCK total", &series(|r| r.pck_total))? {
        written.push(pck);
    }
    for (name, r) in &loaded {
        let path = out_dir.join(format!("mask_hist_{}.svg", sanitize(name)));
        if mask_histogram(&path, r)? {
            written.push(path);
        }
    }
    Ok(written)
}
