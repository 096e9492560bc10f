//! Minimal SVG output: polylines and point markers on a shared axis box.

use std::fmt::Write;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: Vec<[f64; 2]>,
    /// Draw markers at every point as well as the connecting path.
    pub markers: bool,
}

/// Axis limits covering every point, padded a little and never degenerate.
fn bounds(series: &[Series]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in series.iter().flat_map(|s| &s.points) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..2 {
        if !lo[k].is_finite() {
            (lo[k], hi[k]) = (0.0, 1.0);
        }
        let pad = ((hi[k] - lo[k]) * 0.05).max(1e-3);
        lo[k] -= pad;
        hi[k] += pad;
    }
    (lo, hi)
}

pub fn render(title: &str, series: &[Series]) -> String {
    let (lo, hi) = bounds(series);
    let inner_w = WIDTH - 2.0 * MARGIN;
    let inner_h = HEIGHT - 2.0 * MARGIN;
    let map = |p: &[f64; 2]| {
        (
            MARGIN + (p[0] - lo[0]) / (hi[0] - lo[0]) * inner_w,
            HEIGHT - MARGIN - (p[1] - lo[1]) / (hi[1] - lo[1]) * inner_h,
        )
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{inner_w}" height="{inner_h}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        MARGIN / 2.0 + 5.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="10">x [{:.2}, {:.2}]  y [{:.2}, {:.2}]</text>"#,
        HEIGHT - 12.0,
        lo[0],
        hi[0],
        lo[1],
        hi[1]
    );
    for (i, s) in series.iter().enumerate() {
        let path: Vec<String> = s
            .points
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            path.join(" ")
        );
        if s.markers {
            for p in &s.points {
                let (x, y) = map(p);
                let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{}"/>"#, s.color);
            }
        }
        let ly = MARGIN + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            MARGIN + 6.0,
            s.color,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
