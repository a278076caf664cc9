//! Minimal SVG emission for metric curves and sweep bars. Hand-rolled so
//! plots stay dependency-free and byte-deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"16\">{title}</text>\n",
        W / 2.0
    )
}

fn axes(x_label: &str, y_label: &str, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> String {
    let x0 = MARGIN;
    let x1 = W - MARGIN / 2.0;
    let y0 = H - MARGIN;
    let y1 = MARGIN / 2.0 + 10.0;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\" \
         transform=\"rotate(-90 14 {})\">{y_label}</text>\n\
         <text x=\"{x0}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"10\">{x_min:.3}</text>\n\
         <text x=\"{x1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"10\">{x_max:.3}</text>\n\
         <text x=\"{}\" y=\"{y0}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">{y_min:.3}</text>\n\
         <text x=\"{}\" y=\"{y1}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">{y_max:.3}</text>\n",
        (x0 + x1) / 2.0,
        H - 16.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        H - MARGIN + 16.0,
        H - MARGIN + 16.0,
        x0 - 6.0,
        x0 - 6.0,
    )
}

/// Line chart over `(x, y)` points. A single point renders as a marker.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = svg_header(title);
    if points.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    out.push_str(&axes(x_label, y_label, x_min, x_max, y_min, y_max));
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (W - 1.5 * MARGIN);
    let sy = |y: f64| (H - MARGIN) - (y - y_min) / (y_max - y_min) * (H - 1.5 * MARGIN - 10.0);
    if points.len() > 1 {
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
    }
    for &(x, y) in points {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"steelblue\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart with one labelled bar per value. Bars carry `data-value`
/// attributes so emitted values can be cross-checked against the CSV.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let mut out = svg_header(title);
    if values.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let v_max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-12);
    out.push_str(&axes("", "value", 0.0, labels.len() as f64, 0.0, v_max));
    let plot_w = W - 1.5 * MARGIN;
    let slot = plot_w / values.len() as f64;
    let bar_w = slot * 0.6;
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let x = MARGIN + i as f64 * slot + (slot - bar_w) / 2.0;
        let h = (v / v_max) * (H - 1.5 * MARGIN - 10.0);
        let y = (H - MARGIN) - h;
        out.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" \
             fill=\"steelblue\" data-value=\"{v}\"/>\n\
             <text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
             font-size=\"11\">{label}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"monospace\" \
             font-size=\"10\">{v:.4}</text>\n",
            x + bar_w / 2.0,
            H - MARGIN + 16.0,
            x + bar_w / 2.0,
            y - 4.0,
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Reads a run's `metrics.csv` and writes reward/KL/fidelity-vs-iteration
/// curves plus the plotted series as `plots.csv`.
pub fn emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics_path = run_dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(Error::Config(format!(
            "no metrics.csv under {}",
            run_dir.display()
        )));
    }
    let text = fs::read_to_string(&metrics_path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Config(format!("metrics.csv missing column {name}")))
    };
    let (ci, cr, ck, cf) = (
        col("iteration")?,
        col("final_avg_reward")?,
        col("kl_divergence")?,
        col("fidelity")?,
    );
    let mut series: Vec<(f64, f64, f64, f64)> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Config(format!("bad metrics row: {line}")))
        };
        series.push((parse(ci)?, parse(cr)?, parse(ck)?, parse(cf)?));
    }
    if series.is_empty() {
        return Err(Error::EmptyInput("metrics rows"));
    }
    let plots_dir = run_dir.join("plots");
    fs::create_dir_all(&plots_dir)?;

    let mut written = Vec::new();
    let charts: [(&str, &str, fn(&(f64, f64, f64, f64)) -> f64); 3] = [
        ("reward", "final_avg_reward", |r| r.1),
        ("kl", "kl_divergence", |r| r.2),
        ("fidelity", "fidelity", |r| r.3),
    ];
    for (name, label, pick) in charts {
        let points: Vec<(f64, f64)> = series.iter().map(|r| (r.0, pick(r))).collect();
        let svg = line_chart(&format!("{label} vs iteration"), "iteration", label, &points);
        let path = plots_dir.join(format!("{name}.svg"));
        fs::write(&path, svg)?;
        written.push(path);
    }
    let mut csv = String::from("iteration,final_avg_reward,kl_divergence,fidelity\n");
    for (i, r, k, f) in &series {
        csv.push_str(&format!("{i},{r},{k},{f}\n"));
    }
    let csv_path = plots_dir.join("plots.csv");
    fs::write(&csv_path, csv)?;
    written.push(csv_path);
    Ok(written)
}
