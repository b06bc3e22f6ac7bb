//! Static SVG plots of confidence bands, one panel per matrix entry.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{ConfidenceBand, FieldKind};
use crate::error::{Error, Result};

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const COLUMNS: usize = 2;
const TICKS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    /// x-axis label, e.g. `temperature (°C)`.
    pub confounder_label: String,
    /// Output channel names used in panel titles.
    pub channel_labels: Vec<String>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            confounder_label: "confounder".into(),
            channel_labels: Vec::new(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn statistic_name(band: &ConfidenceBand, labels: &[String]) -> String {
    let name = |i: usize| {
        labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("x{}", i + 1))
    };
    let (k, l) = (band.statistic.k, band.statistic.l);
    match (band.statistic.kind, k == l) {
        (FieldKind::Covariance, true) => format!("var({})", name(k)),
        (FieldKind::Covariance, false) => format!("cov({}, {})", name(k), name(l)),
        (FieldKind::Correlation, _) => format!("corr({}, {})", name(k), name(l)),
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{:.3}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Data range padded so that flat data still gets a non-empty axis.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

/// Maximal runs of grid indices where the band is defined.
fn runs(band: &ConfidenceBand) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (g, pt) in band.points.iter().enumerate() {
        match (pt.is_some(), start) {
            (true, None) => start = Some(g),
            (false, Some(s)) => {
                out.push(s..g);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..band.points.len());
    }
    out
}

fn panel(svg: &mut String, band: &ConfidenceBand, index: usize, options: &PlotOptions) {
    let ox = (index % COLUMNS) as f64 * PANEL_W;
    let oy = (index / COLUMNS) as f64 * PANEL_H;
    let (x0, x1) = (ox + MARGIN_L, ox + PANEL_W - MARGIN_R);
    let (y0, y1) = (oy + MARGIN_T, oy + PANEL_H - MARGIN_B);
    let z = band.grid.points();
    let (zlo, zhi) = padded(z[0], z[z.len() - 1]);
    let (mut vlo, mut vhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for pt in band.points.iter().flatten() {
        for v in [pt.lower, pt.upper, pt.estimate] {
            if v.is_finite() {
                vlo = vlo.min(v);
                vhi = vhi.max(v);
            }
        }
    }
    if !vlo.is_finite() {
        (vlo, vhi) = (0.0, 0.0);
    }
    let (vlo, vhi) = padded(vlo, vhi);
    let px = |v: f64| x0 + (v - zlo) / (zhi - zlo) * (x1 - x0);
    let py = |v: f64| y1 - (v - vlo) / (vhi - vlo) * (y1 - y0);

    let title = statistic_name(band, &options.channel_labels);
    let level = 100.0 * (1.0 - band.alpha);
    let _ = writeln!(
        svg,
        r#"<g class="panel" data-statistic="{}">"#,
        escape(&title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
        x0,
        y0,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{} ({}% band)</text>"#,
        (x0 + x1) / 2.0,
        oy + 20.0,
        escape(&title),
        tick_label(level)
    );
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let zt = zlo + f * (zhi - zlo);
        let vt = vlo + f * (vhi - vlo);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            px(zt),
            y1 + 14.0,
            tick_label(zt)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
            x0 - 4.0,
            py(vt) + 3.0,
            tick_label(vt)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
        (x0 + x1) / 2.0,
        y1 + 34.0,
        escape(&options.confounder_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        ox + 16.0,
        (y0 + y1) / 2.0,
        ox + 16.0,
        (y0 + y1) / 2.0,
        escape(&title)
    );

    let runs = runs(band);
    for run in &runs {
        let mut pts = Vec::with_capacity(2 * run.len());
        for g in run.clone() {
            let p = band.points[g].expect("defined in run");
            pts.push(format!("{:.2},{:.2}", px(z[g]), py(p.upper)));
        }
        for g in run.clone().rev() {
            let p = band.points[g].expect("defined in run");
            pts.push(format!("{:.2},{:.2}", px(z[g]), py(p.lower)));
        }
        let _ = writeln!(
            svg,
            r##"<polygon class="band" points="{}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>"##,
            pts.join(" ")
        );
    }
    let mut d = String::new();
    for run in &runs {
        for (i, g) in run.clone().enumerate() {
            let p = band.points[g].expect("defined in run");
            let _ = write!(
                d,
                "{}{:.2},{:.2}",
                if i == 0 {
                    if d.is_empty() {
                        "M"
                    } else {
                        " M"
                    }
                } else {
                    " L"
                },
                px(z[g]),
                py(p.estimate)
            );
        }
    }
    if !d.is_empty() {
        let _ = writeln!(
            svg,
            r##"<path class="estimate" d="{d}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##
        );
    }
    svg.push_str("</g>\n");
}

/// Renders one panel per band. Undefined band points break the curve and
/// the shaded area.
pub fn render_band_plot(bands: &[ConfidenceBand], options: &PlotOptions) -> Result<String> {
    let first = bands.first().ok_or(Error::InvalidParameter {
        name: "bands",
        reason: "nothing to plot".into(),
    })?;
    if bands.iter().any(|b| b.grid != first.grid) {
        return Err(Error::GridMismatch);
    }
    let rows = bands.len().div_ceil(COLUMNS);
    let width = PANEL_W * bands.len().min(COLUMNS) as f64;
    let height = PANEL_H * rows as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = width,
        h = height
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    for (i, band) in bands.iter().enumerate() {
        panel(&mut svg, band, i, options);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_band_plot(path: &Path, bands: &[ConfidenceBand], options: &PlotOptions) -> Result<()> {
    let svg = render_band_plot(bands, options)?;
    fs::write(path, svg).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
