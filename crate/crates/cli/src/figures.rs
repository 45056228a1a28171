//! Dependency-free SVG exports: an attention heatmap and a 2-D scatter.

use std::fmt::Write as _;

const CELL: f64 = 12.0;
const LEFT: f64 = 110.0;
const TOP: f64 = 28.0;

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (f64::from(a) + (f64::from(b) - f64::from(a)) * t).round() as u8
}

/// White-to-blue fill for a weight in [0, 1].
fn heat_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(0xff, 0x1f, t),
        lerp(0xff, 0x4e, t),
        lerp(0xff, 0x8c, t)
    )
}

/// Heatmap of per-variable prototype attention; one row per variable.
/// Cells are scaled by the global maximum so relative structure is visible.
pub fn heatmap_svg(row_labels: &[String], matrix: &[Vec<f64>]) -> String {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    let width = LEFT + cols as f64 * CELL + 10.0;
    let height = TOP + rows as f64 * CELL + 10.0;
    let max = matrix
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT:.0}" y="16">mean attention over prototypes (columns 0..{})</text>"#,
        cols.saturating_sub(1)
    );
    for (r, row) in matrix.iter().enumerate() {
        let y = TOP + r as f64 * CELL;
        let label = row_labels.get(r).map(String::as_str).unwrap_or("");
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">{label}</text>"#, y + CELL - 3.0);
        for (c, &w) in row.iter().enumerate() {
            let x = LEFT + c as f64 * CELL;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{}"><title>{label}[{c}] = {w:.5}</title></rect>"#,
                heat_color(w / max)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of 2-D points with a binary class; class 1 is drawn in red.
pub fn scatter_svg(points: &[(f64, f64, u8)]) -> String {
    let (w, h, pad) = (480.0, 360.0, 36.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y, _) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if points.is_empty() || x0 == x1 {
        x0 = -1.0;
        x1 = 1.0;
    }
    if points.is_empty() || y0 == y1 {
        y0 = -1.0;
        y1 = 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{pad}" y="{pad}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="{:.1}">{x0:.2}</text>"#, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{x1:.2}</text>"#, w - pad - 30.0, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="2" y="{:.1}">{y0:.2}</text>"#, h - pad);
    let _ = writeln!(s, r#"<text x="2" y="{:.1}">{y1:.2}</text>"#, pad + 4.0);
    for &(x, y, label) in points {
        let fill = if label == 1 { "#c44e52" } else { "#4878a8" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{fill}" fill-opacity="0.7"/>"#,
            sx(x),
            sy(y)
        );
    }
    s.push_str("</svg>\n");
    s
}
