//! Static two-panel SVG: accuracy against GMACs and against throughput.

use std::fmt::Write;

use hydravit::eval::SweepRow;

pub struct Series {
    pub name: String,
    pub rows: Vec<SweepRow>,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 320.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Panel {
    title: &'static str,
    x_label: &'static str,
    x: fn(&SweepRow) -> Option<f64>,
}

const PANELS: [Panel; 2] = [
    Panel { title: "Accuracy vs. GMACs", x_label: "GMACs", x: |r| Some(r.macs as f64 / 1e9) },
    Panel { title: "Accuracy vs. throughput", x_label: "images / s", x: |r| r.throughput },
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Renders every series into both panels. Rows without the panel's x value
/// or without accuracy are left out of that panel.
pub fn render(series: &[Series]) -> String {
    let width = 2.0 * PANEL_W;
    let height = PANEL_H + 40.0;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    for (pi, panel) in PANELS.iter().enumerate() {
        let points: Vec<Vec<(f64, f64, usize)>> = series
            .iter()
            .map(|s| {
                let mut pts: Vec<(f64, f64, usize)> =
                    s.rows.iter().filter_map(|r| Some(((panel.x)(r)?, r.accuracy? * 100.0, r.k))).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
                pts
            })
            .collect();
        let (x0, x1) = extent(points.iter().flatten().map(|p| p.0));
        let (y0, y1) = extent(points.iter().flatten().map(|p| p.1));
        let ox = pi as f64 * PANEL_W;
        let (left, right, top, bottom) = (ox + MARGIN, ox + PANEL_W - 16.0, 36.0, PANEL_H - 8.0);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
        writeln!(out, r#"<g class="panel" data-panel="{pi}">"#).unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            (left + right) / 2.0,
            panel.title
        )
        .unwrap();
        writeln!(
            out,
            r#"<path d="M{left:.1},{top:.1} L{left:.1},{bottom:.1} L{right:.1},{bottom:.1}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        for (v, x) in [(x0, left), (x1, right)] {
            writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.4}</text>"#, bottom + 14.0).unwrap();
        }
        for (v, y) in [(y0, bottom), (y1, top)] {
            writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0).unwrap();
        }
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (left + right) / 2.0,
            bottom + 30.0,
            panel.x_label
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">top-1 accuracy (%)</text>"#,
            ox + 14.0,
            (top + bottom) / 2.0,
            ox + 14.0,
            (top + bottom) / 2.0
        )
        .unwrap();
        for (si, (s, pts)) in series.iter().zip(&points).enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            writeln!(out, r#"<g class="series" data-name="{}" stroke="{color}" fill="{color}">"#, escape(&s.name))
                .unwrap();
            if pts.len() > 1 {
                let path: Vec<String> = pts.iter().map(|&(x, y, _)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                writeln!(out, r#"<polyline fill="none" points="{}"/>"#, path.join(" ")).unwrap();
            }
            for &(x, y, k) in pts {
                writeln!(out, r#"<circle class="point" data-k="{k}" cx="{:.2}" cy="{:.2}" r="3"/>"#, sx(x), sy(y))
                    .unwrap();
            }
            writeln!(out, "</g>").unwrap();
        }
        writeln!(out, "</g>").unwrap();
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let y = PANEL_H + 12.0 + 14.0 * (si / 4) as f64;
        let x = MARGIN + 180.0 * (si % 4) as f64;
        writeln!(out, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, y - 9.0).unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 14.0, escape(&s.name)).unwrap();
    }
    out.push_str("</svg>\n");
    out
}
