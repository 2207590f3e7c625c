//! Grouped bar chart of per-cell correlations.
//!
//! One group per protocol cell, a PLCC bar and an SROCC bar in each, with
//! error bars of one standard deviation across replicates. Every bar carries
//! its plotted values as `data-*` attributes formatted exactly as in the JSON
//! reports, so a reader can check the figure against the numbers.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pipeline::EvalReport;

const BAR: f64 = 22.0;
const GAP: f64 = 26.0;
const LEFT: f64 = 56.0;
const TOP: f64 = 30.0;
const PLOT_H: f64 = 260.0;
const LABEL_H: f64 = 150.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// JSON number formatting, so attribute text matches `report.json`.
fn num(v: f64) -> String {
    serde_json::Value::from(v).to_string()
}

/// Renders `reports` in the given order. Correlations are drawn on a fixed
/// `[-1, 1]` axis.
pub fn render_svg(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let group_w = 2.0 * BAR + GAP;
    let width = LEFT + group_w * reports.len() as f64 + GAP;
    let height = TOP + PLOT_H + LABEL_H;
    let y_of = |v: f64| TOP + (1.0 - v.clamp(-1.0, 1.0)) / 2.0 * PLOT_H;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, "<!-- leakbench {} -->", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    for tick in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let y = y_of(tick);
        writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{x2}" y2="{y}" stroke="{c}"/><text x="{tx}" y="{ty}" text-anchor="end">{tick}</text>"##,
            x2 = width - GAP / 2.0,
            c = if tick == 0.0 { "#444" } else { "#ddd" },
            tx = LEFT - 6.0,
            ty = y + 4.0,
        )
        .unwrap();
    }
    let legend_x = width - 150.0;
    for (k, (name, colour)) in [("PLCC", "#4878a8"), ("SROCC", "#e0904a")].iter().enumerate() {
        let x = legend_x + 70.0 * k as f64;
        writeln!(
            s,
            r#"<rect x="{x}" y="8" width="10" height="10" fill="{colour}"/><text x="{tx}" y="17">{name}</text>"#,
            tx = x + 14.0
        )
        .unwrap();
    }
    for (g, report) in reports.iter().enumerate() {
        let sm = &report.summary;
        let x0 = LEFT + GAP + group_w * g as f64;
        let cell = escape(&report.protocol);
        writeln!(s, r#"<g class="cell" data-protocol="{cell}" data-replicates="{}">"#, sm.replicates).unwrap();
        for (k, (metric, mean, std, colour)) in [
            ("plcc", sm.plcc_mean, sm.plcc_std, "#4878a8"),
            ("srocc", sm.srocc_mean, sm.srocc_std, "#e0904a"),
        ]
        .into_iter()
        .enumerate()
        {
            let x = x0 + BAR * k as f64;
            let (y_mean, y_zero) = (y_of(mean), y_of(0.0));
            let (y, h) = (y_mean.min(y_zero), (y_mean - y_zero).abs());
            let cx = x + BAR / 2.0;
            writeln!(
                s,
                r#"<rect class="bar" data-metric="{metric}" data-mean="{m}" data-std="{sd}" x="{x}" y="{y}" width="{BAR}" height="{h}" fill="{colour}"><title>{cell} {metric} {m} ± {sd}</title></rect>"#,
                m = num(mean),
                sd = num(std),
            )
            .unwrap();
            writeln!(
                s,
                r##"<path class="error-bar" data-metric="{metric}" d="M{cx} {lo} V{hi} M{a} {lo} H{b} M{a} {hi} H{b}" stroke="#222" fill="none"/>"##,
                lo = y_of(mean - std),
                hi = y_of(mean + std),
                a = cx - 4.0,
                b = cx + 4.0,
            )
            .unwrap();
        }
        let lx = x0 + BAR;
        let ly = TOP + PLOT_H + 10.0;
        writeln!(
            s,
            r#"<text x="{lx}" y="{ly}" transform="rotate(40 {lx} {ly})">{cell}</text>"#
        )
        .unwrap();
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
