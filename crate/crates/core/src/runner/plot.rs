//! Line charts of metric fields against the epoch, written as plain SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{read_jsonl, MetricRecord, NUMERIC_FIELDS};
use super::RunnerError;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 80.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub field: String,
    /// Run label, or `"mean"` for the across-run mean.
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Drawn against the right-hand axis.
    pub right_axis: bool,
}

/// Reads every metrics file and builds the series to draw: for each field,
/// one per run, plus the mean over runs when there is more than one.
pub fn collect_series(runs: &[(String, Vec<MetricRecord>)], fields: &[String], dual_axis: bool) -> Result<Vec<Series>, RunnerError> {
    if runs.is_empty() {
        return Err(RunnerError::Config("plot needs at least one metrics file".into()));
    }
    if fields.is_empty() {
        return Err(RunnerError::Config(format!("no fields given; valid fields: {}", NUMERIC_FIELDS.join(", "))));
    }
    for f in fields {
        if !NUMERIC_FIELDS.contains(&f.as_str()) {
            return Err(RunnerError::Config(format!(
                "unknown field {f:?}; valid fields: {}",
                NUMERIC_FIELDS.join(", ")
            )));
        }
    }
    if dual_axis && fields.len() != 2 {
        return Err(RunnerError::Config(format!("dual-axis plots take exactly two fields, got {}", fields.len())));
    }
    let mut out = Vec::new();
    for (fi, field) in fields.iter().enumerate() {
        let right_axis = dual_axis && fi == 1;
        let per_run: Vec<Vec<(f64, f64)>> = runs
            .iter()
            .map(|(_, records)| {
                records
                    .iter()
                    .filter_map(|r| r.field(field).flatten().map(|v| (r.epoch as f64, v)))
                    .collect()
            })
            .collect();
        for ((label, _), points) in runs.iter().zip(&per_run) {
            out.push(Series { field: field.clone(), label: label.clone(), points: points.clone(), right_axis });
        }
        if runs.len() > 1 {
            let mut epochs: Vec<f64> = per_run.iter().flatten().map(|p| p.0).collect();
            epochs.sort_by(f64::total_cmp);
            epochs.dedup();
            let points = epochs
                .into_iter()
                .map(|e| {
                    let vals: Vec<f64> = per_run.iter().flatten().filter(|p| p.0 == e).map(|p| p.1).collect();
                    (e, vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            out.push(Series { field: field.clone(), label: "mean".into(), points, right_axis });
        }
    }
    Ok(out)
}

fn range<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders the series as an SVG document.
pub fn render_svg(series: &[Series], title: &str) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| &p.0)));
    let left_vals = series.iter().filter(|s| !s.right_axis).flat_map(|s| s.points.iter().map(|p| &p.1));
    let (l0, l1) = range(left_vals);
    let dual = series.iter().any(|s| s.right_axis);
    let (r0, r1) = range(series.iter().filter(|s| s.right_axis).flat_map(|s| s.points.iter().map(|p| &p.1)));
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64, right: bool| {
        let (a, b) = if right { (r0, r1) } else { (l0, l1) };
        TOP + plot_h - (y - a) / (b - a) * plot_h
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let x = x0 + f * (x1 - x0);
        let px = sx(x);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="#ccc"/><text x="{px:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"##,
            TOP,
            TOP + plot_h,
            TOP + plot_h + 16.0,
            tick_label(x)
        );
        let yl = l0 + f * (l1 - l0);
        let py = sy(yl, false);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="#eee"/><text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            py + 4.0,
            tick_label(yl)
        );
        if dual {
            let yr = r0 + f * (r1 - r0);
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{:.2}" text-anchor="start" font-family="sans-serif" font-size="11">{}</text>"#,
                LEFT + plot_w + 6.0,
                sy(yr, true) + 4.0,
                tick_label(yr)
            );
        }
    }

    let left_fields: Vec<&str> = unique(series.iter().filter(|s| !s.right_axis).map(|s| s.field.as_str()));
    let right_fields: Vec<&str> = unique(series.iter().filter(|s| s.right_axis).map(|s| s.field.as_str()));
    let _ = writeln!(
        svg,
        r#"<text class="axis-label" data-axis="x" x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">epoch</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text class="axis-label" data-axis="left" x="18" y="{0}" transform="rotate(-90 18 {0})" text-anchor="middle" font-family="sans-serif" font-size="13">{1}</text>"#,
        TOP + plot_h / 2.0,
        escape(&left_fields.join(", "))
    );
    if dual {
        let x = WIDTH - 18.0;
        let _ = writeln!(
            svg,
            r#"<text class="axis-label" data-axis="right" x="{x}" y="{0}" transform="rotate(90 {x} {0})" text-anchor="middle" font-family="sans-serif" font-size="13">{1}</text>"#,
            TOP + plot_h / 2.0,
            escape(&right_fields.join(", "))
        );
    }

    for (i, s) in series.iter().enumerate() {
        let colour = if s.label == "mean" { "black" } else { PALETTE[i % PALETTE.len()] };
        let width = if s.label == "mean" { 2.5 } else { 1.2 };
        let dash = if s.right_axis { r#" stroke-dasharray="6 3""# } else { "" };
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y, s.right_axis))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-field="{}" data-run="{}" fill="none" stroke="{colour}" stroke-width="{width}"{dash} points="{}"/>"#,
            escape(&s.field),
            escape(&s.label),
            pts.join(" ")
        );
        let ly = TOP + 14.0 + 14.0 * i as f64;
        let lx = LEFT + 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="{width}"{dash}/><text x="{}" y="{}" font-family="sans-serif" font-size="10">{} ({})</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 3.5,
            escape(&s.field),
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn unique<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for f in it {
        if !out.contains(&f) {
            out.push(f);
        }
    }
    out
}

/// Reads the metrics files, draws the requested fields and writes the SVG.
/// Returns the number of series drawn.
pub fn run_plot(metrics: &[PathBuf], fields: &[String], out: &Path, dual_axis: bool) -> Result<usize, RunnerError> {
    let runs: Vec<(String, Vec<MetricRecord>)> = metrics
        .iter()
        .map(|p| Ok((p.display().to_string(), read_jsonl(p)?)))
        .collect::<Result<_, RunnerError>>()?;
    let series = collect_series(&runs, fields, dual_axis)?;
    let svg = render_svg(&series, &fields.join(" / "));
    std::fs::write(out, svg).map_err(|e| RunnerError::io(out, e))?;
    Ok(series.len())
}
