//! Static reliability diagrams: one bar per bin at its mean accuracy, a
//! marker at its mean confidence and the perfect-calibration diagonal.

use std::fmt::Write;

use mlcc_core::metrics::Bin;

const SIZE: f64 = 360.0;
const MARGIN: f64 = 40.0;

/// Renders `bins` over a confidence axis spanning the bins' range.
pub fn reliability_svg(bins: &[Bin], title: &str) -> String {
    let lo = bins.iter().map(|b| b.lo).fold(f64::INFINITY, f64::min);
    let hi = bins.iter().map(|b| b.hi).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo < hi { (lo, hi) } else { (0.0, 1.0) };
    let plot = SIZE - 2.0 * MARGIN;
    let x = |v: f64| MARGIN + (v - lo) / (hi - lo) * plot;
    let y = |v: f64| SIZE - MARGIN - (v - lo) / (hi - lo) * plot;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    for b in bins.iter().filter(|b| b.count > 0) {
        let top = y(b.mean_acc.clamp(lo, hi));
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c78a8" stroke="white"/>"##,
            x(b.lo),
            top,
            x(b.hi) - x(b.lo),
            y(lo) - top
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#e45756" stroke-width="2"/>"##,
            x(b.lo),
            y(b.mean_conf.clamp(lo, hi)),
            x(b.hi),
            y(b.mean_conf.clamp(lo, hi))
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x(lo),
        y(lo),
        x(hi),
        y(hi)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    for (v, anchor_x, anchor_y) in [(lo, x(lo), SIZE - MARGIN + 16.0), (hi, x(hi), SIZE - MARGIN + 16.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x:.2}" y="{anchor_y:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{v}</text>"#
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">confidence</text>"#,
        SIZE / 2.0,
        SIZE - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {})">accuracy</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
