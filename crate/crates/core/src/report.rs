//! Output helpers: CSV bodies with embedded config headers and a minimal
//! SVG line plot.

use std::fmt::Write as _;

/// Prepend `# key=value` comment lines so every artifact carries the
/// configuration that produced it.
pub fn with_config_header(config: &[(&str, String)], body: &str) -> String {
    let mut out = String::new();
    for (k, v) in config {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str(body);
    out
}

/// Strip `# ` comment lines; used to compare CSV bodies across runs.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parse the `# key=value` header back out of an artifact.
pub fn parse_config_header(text: &str) -> Vec<(String, String)> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| {
            let l = l.trim_start_matches('#').trim();
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [(f64, f64)],
}

const PALETTE: [&str; 4] = ["#1f6fb2", "#c23b22", "#3a7d44", "#7851a9"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

/// Render series as polylines with axes and a legend. No dependencies, no
/// styling beyond what a quick visual check needs.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for &(x, y) in finite {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !x_min.is_finite() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y_min) / (y_max - y_min) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>"#,
        W / 2.0
    );
    // axes
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>
<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{y_label}</text>"#,
        W / 2.0,
        H - 16.0,
        H / 2.0,
        H / 2.0
    );
    for (pos, val, anchor, base) in [
        (sx(x_min), x_min, "start", true),
        (sx(x_max), x_max, "end", true),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{pos}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{val:.4}</text>"#,
            H - MARGIN + 16.0
        );
        let _ = base;
    }
    for (pos, val) in [(sy(y_min), y_min), (sy(y_max), y_max)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{pos}" text-anchor="end" font-family="sans-serif" font-size="11">{val:.4}</text>"#,
            MARGIN - 6.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = write!(path, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.trim_end()
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{x1}" y1="{ly}" x2="{x2}" y2="{ly}" stroke="{color}" stroke-width="2"/>
<text x="{tx}" y="{ty}" font-family="sans-serif" font-size="12">{name}</text>"#,
            x1 = W - MARGIN - 120.0,
            x2 = W - MARGIN - 100.0,
            tx = W - MARGIN - 94.0,
            ty = ly + 4.0,
            name = s.name
        );
    }
    out.push_str("</svg>\n");
    out
}
