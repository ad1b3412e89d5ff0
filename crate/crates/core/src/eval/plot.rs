//! Self-contained SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use super::{EvalError, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One metric over the sweep values.
#[derive(Debug, Clone)]
pub struct SweepSeries {
    pub name: String,
    pub values: Vec<f64>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Metric-versus-sweep plot. Sweep values sit at evenly spaced x positions
/// so zero and large values share one axis. Each point is one `<circle>`
/// tagged with its series name.
pub fn sweep_svg(title: &str, x_label: &str, sweep: &[f64], series: &[SweepSeries]) -> String {
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.values.iter().copied()));
    let n = sweep.len().max(1);
    let x_at = |i: usize| {
        if n == 1 {
            W / 2.0
        } else {
            MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let mut svg = header(title);
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        H - MARGIN,
        W - MARGIN
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>",
        H - MARGIN
    );
    for (i, x) in sweep.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{x}</text>",
            x_at(i),
            H - MARGIN + 16.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        W / 2.0,
        H - 10.0,
        escape(x_label)
    );
    for (tick, v) in [(0, lo), (1, hi)] {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\" class=\"ytick{tick}\">{v:.4}</text>",
            MARGIN - 4.0,
            y_at(v)
        );
    }
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let name = escape(&s.name);
        let pts: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_at(i), y_at(v)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"/>",
            pts.join(" ")
        );
        for (i, &v) in s.values.iter().enumerate() {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{color}\" data-series=\"{name}\" data-x=\"{}\" data-y=\"{v}\"/>",
                x_at(i),
                y_at(v),
                sweep.get(i).copied().unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>",
            W - MARGIN - 80.0,
            MARGIN + 14.0 * si as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Observed path, ground-truth future and candidate futures of one window.
pub fn trajectory_svg(
    title: &str,
    observed: &[[f64; 2]],
    ground_truth: &[[f64; 2]],
    candidates: &[Vec<[f64; 2]>],
) -> String {
    let all = || {
        observed
            .iter()
            .chain(ground_truth)
            .chain(candidates.iter().flatten())
    };
    let (x0, x1) = bounds(all().map(|p| p[0]));
    let (y0, y1) = bounds(all().map(|p| p[1]));
    let scale = ((W - 2.0 * MARGIN) / (x1 - x0)).min((H - 2.0 * MARGIN) / (y1 - y0));
    let map = |p: &[f64; 2]| {
        format!(
            "{:.2},{:.2}",
            MARGIN + (p[0] - x0) * scale,
            H - MARGIN - (p[1] - y0) * scale
        )
    };
    let line = |pts: &[[f64; 2]], color: &str, width: f64, class: &str| {
        let pts: Vec<String> = pts.iter().map(map).collect();
        format!(
            "<polyline class=\"{class}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
            pts.join(" ")
        )
    };
    let mut svg = header(title);
    for c in candidates {
        svg.push_str(&line(c, "#9ecae1", 1.0, "candidate"));
    }
    svg.push_str(&line(observed, "black", 2.0, "observed"));
    let mut future = observed.last().map(|p| vec![*p]).unwrap_or_default();
    future.extend_from_slice(ground_truth);
    svg.push_str(&line(&future, "#d62728", 2.0, "ground-truth"));
    svg.push_str("</svg>\n");
    svg
}

fn write(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_sweep_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    sweep: &[f64],
    series: &[SweepSeries],
) -> Result<()> {
    write(path, sweep_svg(title, x_label, sweep, series))
}

pub fn write_trajectory_plot(
    path: &Path,
    title: &str,
    observed: &[[f64; 2]],
    ground_truth: &[[f64; 2]],
    candidates: &[Vec<[f64; 2]>],
) -> Result<()> {
    write(
        path,
        trajectory_svg(title, observed, ground_truth, candidates),
    )
}
