//! Standalone SVG plots: the temperature sweep and per-class PR curves.
//!
//! Output depends only on the input reports, so regenerating a plot from the
//! same reports gives identical bytes. Null metrics are left out.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::report::EvalReport;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 44.0;

type Series = (&'static str, fn(&EvalReport) -> Option<f64>);

struct Panel<'a> {
    title: &'a str,
    x_label: &'a str,
    /// `(x, y)` points in drawing order.
    points: Vec<(f64, f64)>,
    x_range: (f64, f64),
    y_range: (f64, f64),
    step: bool,
}

fn range(values: impl Iterator<Item = f64>, floor: (f64, f64)) -> (f64, f64) {
    let (lo, hi) = values.fold(floor, |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn draw(out: &mut String, p: &Panel, ox: f64, oy: f64) {
    let (x0, x1) = p.x_range;
    let (y0, y1) = p.y_range;
    let w = PANEL_W - 2.0 * MARGIN;
    let h = PANEL_H - 2.0 * MARGIN;
    let sx = |x: f64| ox + MARGIN + (x - x0) / (x1 - x0) * w;
    let sy = |y: f64| oy + PANEL_H - MARGIN - (y - y0) / (y1 - y0) * h;
    let _ = writeln!(out, r#"<g class="panel" data-series="{}">"#, p.title);
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"##,
        ox + PANEL_W / 2.0,
        oy + 18.0,
        p.title
    );
    let _ = writeln!(
        out,
        r##"<path d="M{:.2},{:.2} V{:.2} H{:.2}" fill="none" stroke="#444"/>"##,
        sx(x0),
        sy(y1),
        sy(y0),
        sx(x1)
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"##,
        ox + PANEL_W / 2.0,
        oy + PANEL_H - 8.0,
        p.x_label
    );
    for (v, anchor, x, y) in [
        (y0, "end", sx(x0) - 4.0, sy(y0)),
        (y1, "end", sx(x0) - 4.0, sy(y1) + 8.0),
        (x0, "middle", sx(x0), sy(y0) + 14.0),
        (x1, "middle", sx(x1), sy(y0) + 14.0),
    ] {
        let _ = writeln!(
            out,
            r##"<text class="tick" x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-size="9">{v}</text>"##
        );
    }
    if !p.points.is_empty() {
        let mut d = String::new();
        for (i, &(x, y)) in p.points.iter().enumerate() {
            if i == 0 {
                let _ = write!(d, "M{:.2},{:.2}", sx(x), sy(y));
            } else if p.step {
                let _ = write!(d, " V{:.2} H{:.2}", sy(y), sx(x));
            } else {
                let _ = write!(d, " L{:.2},{:.2}", sx(x), sy(y));
            }
        }
        let _ = writeln!(
            out,
            r##"<path class="series" d="{d}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>"##
        );
    }
    for &(x, y) in &p.points {
        let _ = writeln!(
            out,
            r##"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f5fa8"><title>{x}, {y}</title></circle>"##,
            sx(x),
            sy(y)
        );
        if !p.step {
            let _ = writeln!(
                out,
                r##"<text class="value" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="8">{y}</text>"##,
                sx(x),
                sy(y) - 5.0
            );
        }
    }
    out.push_str("</g>\n");
}

fn document(panels: &[Panel], columns: usize) -> String {
    let rows = panels.len().div_ceil(columns).max(1);
    let width = PANEL_W * columns as f64;
    let height = PANEL_H * rows as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, p) in panels.iter().enumerate() {
        draw(
            &mut out,
            p,
            (i % columns) as f64 * PANEL_W,
            (i / columns) as f64 * PANEL_H,
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Four panels (U-Recall, mAP over all known classes, A-OSE, WI) against
/// the objectness temperature, one point per report.
pub fn sweep_svg(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::domain("a sweep plot needs at least one report"));
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.config.tau.total_cmp(&b.config.tau));
    let x_range = range(sorted.iter().map(|r| r.config.tau), (f64::INFINITY, f64::NEG_INFINITY));
    let series: [Series; 4] = [
        ("u_recall", |r| r.u_recall),
        ("map_both", |r| r.map_both),
        ("a_ose", |r| Some(r.a_ose as f64)),
        ("wi", |r| r.wi),
    ];
    let panels: Vec<Panel> = series
        .iter()
        .map(|(name, get)| {
            let points: Vec<(f64, f64)> = sorted
                .iter()
                .filter_map(|r| get(r).map(|y| (r.config.tau, y)))
                .collect();
            let floor = if *name == "u_recall" || *name == "map_both" {
                (0.0, 1.0)
            } else {
                (0.0, f64::NEG_INFINITY)
            };
            Panel {
                title: name,
                x_label: "tau",
                y_range: range(points.iter().map(|p| p.1), floor),
                points,
                x_range,
                step: false,
            }
        })
        .collect();
    Ok(document(&panels, 2))
}

/// One precision-recall panel per class of the report.
pub fn pr_svg(report: &EvalReport) -> String {
    let titles: Vec<String> = report.pr_curves.keys().map(|c| format!("class {c}")).collect();
    let panels: Vec<Panel> = report
        .pr_curves
        .values()
        .zip(&titles)
        .map(|(curve, title)| {
            // Start the envelope at recall 0 with the first precision.
            let mut points = Vec::with_capacity(curve.len() + 1);
            if let Some(first) = curve.first() {
                points.push((0.0, first.precision));
            }
            points.extend(curve.iter().map(|p| (p.recall, p.precision)));
            Panel {
                title,
                x_label: "recall",
                points,
                x_range: (0.0, 1.0),
                y_range: (0.0, 1.0),
                step: true,
            }
        })
        .collect();
    document(&panels, 2)
}
