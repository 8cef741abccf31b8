//! Minimal deterministic SVG line plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::trace::TrainingTrace;
use crate::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Series {
    /// `(t, column)` from a trace; non-finite values are dropped.
    pub fn from_trace(trace: &TrainingTrace, column: &str, label: impl Into<String>) -> Result<Self> {
        let ys = trace.column(column).ok_or_else(|| Error::InvalidArgument(format!("unknown trace column {column:?}")))?;
        let ts = trace.column("t").unwrap_or_else(|| (0..ys.len()).map(|i| i as f64).collect());
        let (xs, ys) = ts.into_iter().zip(ys).filter(|(x, y)| x.is_finite() && y.is_finite()).unzip();
        Ok(Self { label: label.into(), xs, ys })
    }
}

/// One plot file: a name (file stem) and the trace columns it overlays.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub name: String,
    pub columns: Vec<String>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Renders series as polylines. A legend is drawn when `legend` is set.
pub fn render_svg(title: &str, series: &[Series], legend: bool) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.xs.iter().copied()));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.ys.iter().copied()));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<path d="M{m},{t} L{m},{b} L{r},{b}" fill="none" stroke="black" stroke-width="1"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#, MARGIN - 4.0, y + 3.0, tick(v));
    }
    for (v, x) in [(x0, MARGIN), (x1, WIDTH - MARGIN)] {
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#, HEIGHT - MARGIN + 14.0, tick(v));
    }
    for (n, s) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let points: Vec<String> = s.xs.iter().zip(&s.ys).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
    }
    if legend {
        for (n, s) in series.iter().enumerate() {
            let color = PALETTE[n % PALETTE.len()];
            let y = MARGIN + 14.0 * n as f64;
            let x = WIDTH - MARGIN - 150.0;
            let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 18.0);
            let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, x + 24.0, y + 4.0, escape(&s.label));
        }
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes one SVG per spec into `dir`. Unknown columns are an error and
/// nothing is written in that case.
pub fn emit_plots(trace: &TrainingTrace, specs: &[PlotSpec], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut rendered = Vec::with_capacity(specs.len());
    for spec in specs {
        let series = spec.columns.iter().map(|c| Series::from_trace(trace, c, c.clone())).collect::<Result<Vec<_>>>()?;
        rendered.push((dir.join(format!("{}.svg", spec.name)), render_svg(&spec.name, &series, series.len() > 1)));
    }
    if !rendered.is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    for (path, svg) in &rendered {
        std::fs::write(path, svg)?;
    }
    Ok(rendered.into_iter().map(|(p, _)| p).collect())
}

/// The usual training plots: `J_hat`, the first coordinate of every
/// community (or agent) critic, and the first coordinate of up to eight
/// policies.
pub fn default_specs(trace: &TrainingTrace, critic_prefix: &str) -> Vec<PlotSpec> {
    let mut specs = vec![PlotSpec { name: "J_hat".into(), columns: vec!["J_hat".into()] }];
    let critic: Vec<String> = trace.columns.iter().filter(|c| c.starts_with(&format!("{critic_prefix}_")) && c.ends_with("_1")).cloned().collect();
    if !critic.is_empty() {
        specs.push(PlotSpec { name: critic_prefix.to_string(), columns: critic });
    }
    let theta: Vec<String> = trace.columns.iter().filter(|c| c.starts_with("theta_") && c.ends_with("_1")).take(8).cloned().collect();
    if !theta.is_empty() {
        specs.push(PlotSpec { name: "theta".into(), columns: theta });
    }
    specs
}
