//! Minimal hand-written SVG charts and PGM slices. Output is deterministic.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str, xr: (f64, f64), yr: (f64, f64)) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{x_label}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>
"#,
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = PAD + f * (W - 2.0 * PAD);
        let y = H - PAD - f * (H - 2.0 * PAD);
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            H - PAD + 16.0,
            xr.0 + f * (xr.1 - xr.0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            PAD - 4.0,
            y + 4.0,
            yr.0 + f * (yr.1 - yr.0)
        );
    }
}

fn map(v: f64, r: (f64, f64), lo: f64, hi: f64) -> f64 {
    lo + (v - r.0) / (r.1 - r.0) * (hi - lo)
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let xr = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label, xr, yr);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    map(x, xr, PAD, W - PAD),
                    map(y, yr, H - PAD, PAD)
                )
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * k as f64,
            s.name
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn bar_chart(title: &str, x_label: &str, edges: &[f64], counts: &[u64]) -> String {
    let xr = bounds(edges.iter().copied());
    let yr = (0.0, counts.iter().copied().max().unwrap_or(1).max(1) as f64);
    let mut out = String::new();
    frame(&mut out, title, x_label, "count", xr, yr);
    for (i, &c) in counts.iter().enumerate() {
        let x0 = map(edges[i], xr, PAD, W - PAD);
        let x1 = map(edges[i + 1], xr, PAD, W - PAD);
        let y = map(c as f64, yr, H - PAD, PAD);
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
            (x1 - x0).max(0.0),
            (H - PAD - y).max(0.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Binary PGM (P5, maxval 255), min–max scaled; a uniform image is all 0.
pub fn pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}
