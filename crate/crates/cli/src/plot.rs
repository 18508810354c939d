//! Dependency-free SVG line and bar charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{io_error, write_text, CliError, ErrorKind, PlotArgs};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// `(step, loss)` rows of a `loss.csv`.
pub fn read_loss_csv(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut cols = line.split(',');
        let parse = |s: Option<&str>| s.and_then(|s| s.trim().parse::<f64>().ok());
        match (parse(cols.next()), parse(cols.next())) {
            (Some(s), Some(l)) => rows.push((s, l)),
            _ => {
                return Err(CliError::new(
                    ErrorKind::Input,
                    format!("{}:{}: expected step,loss,k", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{MARGIN},{MARGIN} V{} H{}" fill="none" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN / 2.0
    );
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Overlaid polylines, one per series, with a log-free linear y axis.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 1.5 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = header(title);
    for (i, v) in [(0usize, y0), (1, y1)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.4}</text>"#, MARGIN - 4.0, py(v) + 4.0 * i as f64);
    }
    for v in [x0, x1] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#, px(v), H - MARGIN + 16.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#, d.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - 1.5 * MARGIN,
            MARGIN + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per labelled value; missing values are drawn as an empty slot.
pub fn bar_chart(title: &str, bars: &[(String, Option<f64>)]) -> String {
    let (lo, hi) = range(bars.iter().filter_map(|b| b.1));
    let (y0, y1) = (lo.min(0.0), hi.max(0.0));
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let slot = (W - 1.5 * MARGIN) / bars.len().max(1) as f64;
    let mut s = header(title);
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0, py(v));
    }
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.15);
        if let Some(v) = value {
            let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                slot * 0.7,
                bottom - top,
                COLORS[i % COLORS.len()]
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#, x + slot * 0.35, top - 4.0);
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - MARGIN + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn label_for(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(p) if stem == "loss" || stem == "report" => p.to_string_lossy().into_owned(),
        _ => stem,
    }
}

pub fn cmd_plot(a: &PlotArgs) -> Result<(), CliError> {
    if a.losses.is_empty() && a.reports.is_empty() {
        return Err(CliError::new(ErrorKind::Usage, "nothing to plot: pass --loss and/or --report"));
    }
    if !a.losses.is_empty() {
        let series = a
            .losses
            .iter()
            .map(|p| Ok((label_for(p), read_loss_csv(p)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        write_text(&a.out.join("loss.svg"), &line_chart("training loss", &series))?;
    }
    if !a.reports.is_empty() {
        let mut bars = Vec::new();
        for p in &a.reports {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            let json: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::new(ErrorKind::Input, format!("{}: {e}", p.display())))?;
            let field = json.get(&a.metric).ok_or_else(|| {
                CliError::new(ErrorKind::Input, format!("{} has no field {}", p.display(), a.metric))
            })?;
            bars.push((label_for(p), field.as_f64()));
        }
        write_text(&a.out.join("metrics.svg"), &bar_chart(&a.metric, &bars))?;
    }
    Ok(())
}
