//! Plain-text summary and SVG curves for a finished run directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use cdkd_core::cca::{TAU_MAX, TAU_MIN};
use plotters::prelude::*;

use crate::error::{HarnessError, Result};
use crate::metrics::{read_metrics, MetricRow};
use crate::train::METRICS_FILE;

pub const SUMMARY_FILE: &str = "summary.txt";
pub const LOSS_PLOT: &str = "losses.svg";
pub const TAU_PLOT: &str = "tau.svg";
pub const XI_PLOT: &str = "xi.svg";
pub const PCK_PLOT: &str = "pck.svg";

/// One named curve of `(epoch, value)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub file: &'static str,
    pub title: &'static str,
    pub series: Vec<Series>,
}

/// What [`emit_report`] wrote.
#[derive(Debug, Clone)]
pub struct Report {
    pub epochs: usize,
    pub summary: String,
    pub plots: Vec<Plot>,
    pub files: Vec<PathBuf>,
}

fn series(rows: &[MetricRow], split: &str, label: &str, value: fn(&MetricRow) -> f64) -> Series {
    Series {
        label: format!("{label} ({split})"),
        points: rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| (r.epoch as f64, value(r)))
            .collect(),
    }
}

/// The curves drawn for a metrics history. τ and ξ are logged identically
/// on both splits, so they are plotted once from the training rows.
pub fn build_plots(rows: &[MetricRow]) -> Vec<Plot> {
    let mut losses = Vec::new();
    for split in ["train", "val"] {
        losses.push(series(rows, split, "total", |r| r.loss_total));
        losses.push(series(rows, split, "task", |r| r.loss_ori));
        losses.push(series(rows, split, "feature", |r| r.loss_fea));
        losses.push(series(rows, split, "logit", |r| r.loss_logit));
    }
    vec![
        Plot {
            file: LOSS_PLOT,
            title: "loss components",
            series: losses,
        },
        Plot {
            file: TAU_PLOT,
            title: "temperature",
            series: vec![series(rows, "train", "tau", |r| r.tau)],
        },
        Plot {
            file: XI_PLOT,
            title: "difficulty coefficient",
            series: vec![series(rows, "train", "xi", |r| r.xi)],
        },
        Plot {
            file: PCK_PLOT,
            title: "PCK",
            series: vec![series(rows, "train", "pck", |r| r.pck), series(rows, "val", "pck", |r| r.pck)],
        },
    ]
}

fn epoch_count(rows: &[MetricRow]) -> usize {
    let mut epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    epochs.len()
}

pub fn summarize(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    let epochs = epoch_count(rows);
    let val: Vec<&MetricRow> = rows.iter().filter(|r| r.split == "val").collect();
    let _ = writeln!(out, "epochs: {epochs}");
    match val.iter().filter(|r| r.pck.is_finite()).max_by(|a, b| a.pck.total_cmp(&b.pck).then(b.epoch.cmp(&a.epoch))) {
        Some(best) => {
            let _ = writeln!(out, "best val pck: {:.4} at epoch {}", best.pck, best.epoch);
        }
        None => {
            let _ = writeln!(out, "best val pck: none");
        }
    }
    if let Some(last) = val.last() {
        let _ = writeln!(
            out,
            "final val: pck {:.4}, total {:.6}, task {:.6}, feature {:.6}, logit {:.6}",
            last.pck, last.loss_total, last.loss_ori, last.loss_fea, last.loss_logit
        );
    }
    let taus: Vec<f64> = rows.iter().map(|r| r.tau).collect();
    if !taus.is_empty() {
        let (lo, hi) = taus.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
        let inside = lo >= TAU_MIN && hi <= TAU_MAX;
        let _ = writeln!(
            out,
            "tau range: [{lo:.6}, {hi:.6}] {}",
            if inside { "within bounds" } else { "OUT OF BOUNDS" }
        );
    }
    let xis: Vec<f64> = rows.iter().filter(|r| r.split == "train").map(|r| r.xi).collect();
    let monotone = xis.windows(2).all(|w| w[1] >= w[0]);
    let _ = writeln!(
        out,
        "xi: {} to {} {}",
        xis.first().copied().unwrap_or(0.0),
        xis.last().copied().unwrap_or(0.0),
        if monotone { "non-decreasing" } else { "DECREASES" }
    );
    if rows.iter().any(|r| !r.loss_total.is_finite()) {
        let _ = writeln!(out, "run aborted on a non-finite loss");
    }
    out
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn plot_error<E: std::fmt::Display>(file: &str) -> impl Fn(E) -> HarnessError + '_ {
    move |e| HarnessError::Io(std::io::Error::other(format!("drawing {file}: {e}")))
}

/// Value range padded so flat series still get a visible band.
fn value_range(plot: &Plot) -> (f64, f64) {
    let values = plot.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

fn draw(plot: &Plot, epochs: usize, path: &Path) -> Result<()> {
    let err = plot_error(plot.file);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let (lo, hi) = value_range(plot);
    let x_max = epochs.saturating_sub(1).max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(plot.title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0..x_max, lo..hi)
        .map_err(&err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(&err)?;
    for (i, s) in plot.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(&err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// Reads `metrics.csv` from `run_dir` and writes the summary and plots next
/// to it. The CSV itself is only read.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let csv_path = run_dir.join(METRICS_FILE);
    let file = File::open(&csv_path).map_err(|e| {
        HarnessError::Metrics(format!("cannot open {}: {e}", csv_path.display()))
    })?;
    let rows = read_metrics(file)?;
    let epochs = epoch_count(&rows);
    let summary = summarize(&rows);
    let summary_path = run_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, &summary)?;
    let plots = build_plots(&rows);
    let mut files = vec![summary_path];
    for plot in &plots {
        let path = run_dir.join(plot.file);
        draw(plot, epochs, &path)?;
        files.push(path);
    }
    Ok(Report {
        epochs,
        summary,
        plots,
        files,
    })
}
