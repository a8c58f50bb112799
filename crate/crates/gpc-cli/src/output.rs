//! File output helpers: CSV text assembly with round-trip float formatting
//! and a minimal SVG line plot.

use std::fmt::Write as _;
use std::path::Path;

use gpc_core::{GpcError, Result};

/// Shortest representation that parses back to the same 64-bit float, so
/// identical runs produce identical bytes.
pub fn float(v: f64) -> String {
    format!("{v}")
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GpcError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GpcError::io(dir, e))
}

const PALETTE: [&str; 6] = [
    "#1f6fb4", "#c43c33", "#2a9240", "#8a56b0", "#d9822b", "#4f6d7a",
];

/// One polyline per series over a shared y-range, x spanning sample
/// indices. Enough to eyeball a training curve; not a plotting library.
pub fn line_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 400.0;
    const M: f64 = 48.0;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &y in ys {
            if y.is_finite() {
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }

    let y_of = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        W / 2.0
    );
    // Axes and range labels.
    let _ = write!(
        svg,
        r##"<line x1="{M}" y1="{0}" x2="{1}" y2="{0}" stroke="#555"/><line x1="{M}" y1="{M}" x2="{M}" y2="{0}" stroke="#555"/>"##,
        H - M,
        W - M
    );
    let _ = write!(
        svg,
        r#"<text x="4" y="{}" font-size="10">{:.4}</text><text x="4" y="{}" font-size="10">{:.4}</text>"#,
        M + 4.0,
        hi,
        H - M,
        lo
    );

    for (si, (label, ys)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if ys.len() > 1 {
            let n = ys.len();
            let mut points = String::new();
            for (i, &y) in ys.iter().enumerate() {
                let x = M + (W - 2.0 * M) * (i as f64) / ((n - 1) as f64);
                let _ = write!(points, "{x:.2},{:.2} ", y_of(y.clamp(lo, hi)));
            }
            let _ = write!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                points.trim_end()
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}" font-size="11">{label}</text>"#,
            W - M + 4.0,
            M + 14.0 * si as f64
        );
    }
    svg.push_str("</svg>");
    svg
}
