//! Single-file SVG line charts for loss and success-rate curves. Plot data
//! itself is emitted as CSV by the callers; the SVG is an optional visual.

use std::path::Path;

use crate::error::{Error, Result};
use crate::storage::write_atomic;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 46.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// One named series of y-values plotted against its index.
pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
}

/// Render series as an SVG line chart and write it atomically.
pub fn write_line_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.iter().all(|s| s.values.is_empty()) {
        return Err(Error::Precondition("nothing to plot".into()));
    }
    let y_min = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let y_max = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(y_min + 1e-12);
    let x_max = series.iter().map(|s| s.values.len()).max().unwrap_or(1) as f64;

    let x_of = |i: f64| MARGIN + (WIDTH - 2.0 * MARGIN) * i / (x_max - 1.0).max(1.0);
    let y_of = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - y_min) / (y_max - y_min);

    write_atomic(path, |w| {
        let io = |e| Error::io(path, e);
        writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        )
        .map_err(io)?;
        writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).map_err(io)?;
        writeln!(
            w,
            r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#,
            WIDTH / 2.0
        )
        .map_err(io)?;
        // Axes.
        writeln!(
            w,
            r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
            m = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN,
            t = MARGIN
        )
        .map_err(io)?;
        for (frac, value) in [(0.0, y_min), (0.5, (y_min + y_max) / 2.0), (1.0, y_max)] {
            let y = y_of(y_min + frac * (y_max - y_min));
            writeln!(
                w,
                r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{value:.3}</text>"#,
                MARGIN - 6.0,
                y + 3.0
            )
            .map_err(io)?;
        }
        writeln!(
            w,
            r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle" font-family="sans-serif" font-size="11">{y_label}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0
        )
        .map_err(io)?;
        for (si, s) in series.iter().enumerate() {
            if s.values.is_empty() {
                continue;
            }
            let color = COLORS[si % COLORS.len()];
            let points: Vec<String> = s
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i as f64), y_of(v)))
                .collect();
            writeln!(
                w,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                points.join(" ")
            )
            .map_err(io)?;
            writeln!(
                w,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
                WIDTH - MARGIN + 4.0,
                MARGIN + 14.0 * si as f64,
                s.label
            )
            .map_err(io)?;
        }
        writeln!(w, "</svg>").map_err(io)
    })
}

/// Write series as CSV columns (`index,label1,label2,...`), padding short
/// series with empty cells.
pub fn write_series_csv(path: &Path, series: &[Series]) -> Result<()> {
    let rows = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    write_atomic(path, |w| {
        let io = |e| Error::io(path, e);
        let header: Vec<&str> = series.iter().map(|s| s.label).collect();
        writeln!(w, "index,{}", header.join(",")).map_err(io)?;
        for i in 0..rows {
            let cells: Vec<String> = series
                .iter()
                .map(|s| {
                    s.values
                        .get(i)
                        .map(|v| v.to_string())
                        .unwrap_or_default()
                })
                .collect();
            writeln!(w, "{i},{}", cells.join(",")).map_err(io)?;
        }
        Ok(())
    })
}
