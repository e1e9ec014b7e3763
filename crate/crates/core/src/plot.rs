//! Minimal SVG charts for reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                b.0 = b.0.min(x);
                b.1 = b.1.max(x);
                b.2 = b.2.min(y);
                b.3 = b.3.max(y);
            }
        }
    }
    if !b.0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if b.1 <= b.0 {
        b.1 = b.0 + 1.0;
    }
    if b.3 <= b.2 {
        b.3 = b.2 + 1.0;
    }
    b
}

fn header(title: &str, xlabel: &str, ylabel: &str, b: (f64, f64, f64, f64)) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" text-anchor="middle">{:.3}</text>"#, H - PAD + 14.0, b.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{:.3}</text>"#, W - PAD, H - PAD + 14.0, b.1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, PAD - 4.0, H - PAD, b.2);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, PAD - 4.0, PAD + 4.0, b.3);
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn project(b: (f64, f64, f64, f64), x: f64, y: f64) -> (f64, f64) {
    (
        PAD + (x - b.0) / (b.1 - b.0) * (W - 2.0 * PAD),
        H - PAD - (y - b.2) / (b.3 - b.2) * (H - 2.0 * PAD),
    )
}

/// Line chart of one or more series; non-finite points break the line.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let b = bounds(series);
    let mut s = header(title, xlabel, ylabel, b);
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in &ser.points {
            if !(x.is_finite() && y.is_finite()) {
                pen_down = false;
                continue;
            }
            let (px, py) = project(b, x, y);
            let _ = write!(d, "{}{px:.2},{py:.2} ", if pen_down { "L" } else { "M" });
            pen_down = true;
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            PAD + 8.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Short line segments from each `(x, y)` along `(dx, dy)`, rescaled so the
/// longest spans `frac` of the axis range.
pub fn quiver(title: &str, xlabel: &str, ylabel: &str, arrows: &[(f64, f64, f64, f64)], frac: f64) -> String {
    let pts: Vec<(f64, f64)> = arrows.iter().map(|a| (a.0, a.1)).collect();
    let b = bounds(&[Series::new("", pts)]);
    let mut s = header(title, xlabel, ylabel, b);
    let longest = arrows
        .iter()
        .map(|a| ((a.2 / (b.1 - b.0)).powi(2) + (a.3 / (b.3 - b.2)).powi(2)).sqrt())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let k = if longest > 0.0 { frac / longest } else { 0.0 };
    for &(x, y, dx, dy) in arrows {
        if !(dx.is_finite() && dy.is_finite()) {
            continue;
        }
        let (x0, y0) = project(b, x, y);
        let (x1, y1) = project(b, x + k * dx, y + k * dy);
        let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="#1f77b4"/>"##);
        let _ = writeln!(s, r##"<circle cx="{x0:.2}" cy="{y0:.2}" r="1.2" fill="#1f77b4"/>"##);
    }
    s.push_str("</svg>\n");
    s
}
