//! Hand-written SVG line charts.

use super::{io_error, HarnessError, SweepResult};
use crate::datagen::BiasKind;
use crate::stats::BreakingPointReport;
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64>, y_min: f64, y_max: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in xs {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        Frame { x_min: lo, x_max: hi, y_min, y_max }
    }

    fn x(&self, v: f64) -> f64 {
        LEFT + (v - self.x_min) / (self.x_max - self.x_min) * (W - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let v = v.clamp(self.y_min, self.y_max);
        H - BOTTOM - (v - self.y_min) / (self.y_max - self.y_min) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        writeln!(out, r##"<g class="axes" stroke="#000" stroke-width="1">"##).unwrap();
        writeln!(out, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/>"#).unwrap();
        writeln!(out, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/>"#).unwrap();
        writeln!(out, "</g>").unwrap();
        writeln!(out, r#"<g class="ticks" font-family="sans-serif" font-size="11">"#).unwrap();
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x_min + f * (self.x_max - self.x_min);
            let yv = self.y_min + f * (self.y_max - self.y_min);
            let (px, py) = (self.x(xv), self.y(yv));
            writeln!(out, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.3}</text>"#, y0 + 16.0).unwrap();
            writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#, x0 - 6.0, py + 4.0).unwrap();
        }
        writeln!(out, "</g>").unwrap();
        writeln!(
            out,
            r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 18.0,
            escape(x_label)
        )
        .unwrap();
        writeln!(
            out,
            r#"<text class="y-label" x="18" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        )
        .unwrap();
    }

    /// Upward triangle sitting on the x-axis at `v`.
    fn marker(&self, out: &mut String, v: f64, color: &str, label: &str) {
        let x = self.x(v);
        let y = H - BOTTOM;
        writeln!(
            out,
            r#"<path class="breaking-point" d="M {x:.2} {:.2} L {:.2} {y:.2} L {:.2} {y:.2} Z" fill="{color}"><title>{}</title></path>"#,
            y - 10.0,
            x - 6.0,
            x + 6.0,
            escape(label)
        )
        .unwrap();
    }
}

fn header(out: &mut String, title: &str, provenance: &str) {
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(out, "<title>{}</title>", escape(title)).unwrap();
    writeln!(out, "<desc>{}</desc>", escape(provenance)).unwrap();
    writeln!(out, r##"<rect width="{W}" height="{H}" fill="#fff"/>"##).unwrap();
}

fn legend(out: &mut String, i: usize, name: &str, color: &str) {
    let y = TOP + 18.0 * i as f64;
    let x = W - RIGHT + 16.0;
    writeln!(
        out,
        r#"<g class="legend"><rect x="{x:.2}" y="{:.2}" width="14" height="4" fill="{color}"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text></g>"#,
        y - 2.0,
        x + 20.0,
        y + 4.0,
        escape(name)
    )
    .unwrap();
}

fn points(frame: &Frame, pts: &[(f64, f64)]) -> String {
    pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y))).collect::<Vec<_>>().join(" ")
}

fn x_label(kind: BiasKind) -> &'static str {
    match kind {
        BiasKind::ColorVariance => "colour variance (weaker bias →)",
        _ => "H(Y|A) in nats (weaker bias →)",
    }
}

/// Mean unbiased accuracy per method with a ±1 std band, and a triangle on
/// the x-axis at each method's breaking point.
pub fn render_plot(result: &SweepResult, reports: &[BreakingPointReport]) -> String {
    let frame = Frame::new(result.config.grid.iter().map(|s| s.axis_value()), 0.0, 1.0);
    let mut out = String::new();
    let provenance = serde_json::to_string(&result.config).expect("config serializes");
    header(&mut out, "Unbiased accuracy across bias strength", &provenance);
    frame.axes(&mut out, x_label(result.config.bias_kind()), "unbiased accuracy");
    for (i, &method) in result.config.methods.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let cells: Vec<_> = result.summary.iter().filter(|c| c.method == method && c.completed > 0).collect();
        let mean: Vec<(f64, f64)> = cells.iter().map(|c| (c.axis_value, c.acc_unbiased_mean)).collect();
        if cells.len() > 1 {
            let mut band: Vec<(f64, f64)> = cells.iter().map(|c| (c.axis_value, c.acc_unbiased_mean + c.acc_unbiased_std)).collect();
            band.extend(cells.iter().rev().map(|c| (c.axis_value, c.acc_unbiased_mean - c.acc_unbiased_std)));
            writeln!(out, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, points(&frame, &band)).unwrap();
        }
        writeln!(
            out,
            r#"<polyline class="mean" data-method="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            method,
            points(&frame, &mean)
        )
        .unwrap();
        for &(x, y) in &mean {
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, frame.x(x), frame.y(y)).unwrap();
        }
        legend(&mut out, i, method.name(), color);
        if let Some(bp) = reports.iter().find(|r| r.method == method.name()).and_then(|r| r.breaking_point) {
            frame.marker(&mut out, bp, color, &format!("{method} breaking point {bp:.4}"));
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn emit_plot(result: &SweepResult, reports: &[BreakingPointReport], path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_plot(result, reports)).map_err(io_error(path))
}

/// p-value per level for each method, the significance line, and breaking
/// point markers. Used when only p-values are available.
pub fn render_pvalue_plot(reports: &[BreakingPointReport]) -> String {
    let frame = Frame::new(reports.iter().flat_map(|r| r.grid.iter().copied()), 0.0, 1.0);
    let mut out = String::new();
    let names: Vec<&str> = reports.iter().map(|r| r.method.as_str()).collect();
    header(&mut out, "One-sided KS p-values across bias strength", &format!("methods: {}", names.join(", ")));
    frame.axes(&mut out, "bias level (weaker bias →)", "p-value");
    if let Some(alpha) = reports.first().map(|r| r.alpha) {
        writeln!(
            out,
            r##"<line class="alpha" x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
            W - RIGHT,
            y = frame.y(alpha)
        )
        .unwrap();
    }
    for (i, r) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = r.grid.iter().copied().zip(r.p_values.iter().copied()).collect();
        writeln!(
            out,
            r#"<polyline class="mean" data-method="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&r.method),
            points(&frame, &pts)
        )
        .unwrap();
        legend(&mut out, i, &r.method, color);
        if let Some(bp) = r.breaking_point {
            frame.marker(&mut out, bp, color, &format!("{} breaking point {bp}", r.method));
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn emit_pvalue_plot(reports: &[BreakingPointReport], path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_pvalue_plot(reports)).map_err(io_error(path))
}
