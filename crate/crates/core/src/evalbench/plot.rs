//! Privacy-emotion scatter data: EER-lazy on x, UAR on y.

use std::fmt::Write as _;

use super::MetricsReport;

pub fn privacy_emotion_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from("experiment,eer_lazy,uar\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.experiment, r.eer_lazy, r.uar).expect("string write");
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained SVG scatter. Both axes span 0..100 percent.
pub fn privacy_emotion_svg(rows: &[MetricsReport]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    let x = |v: f64| M + v.clamp(0.0, 100.0) / 100.0 * (W - 2.0 * M);
    let y = |v: f64| H - M - v.clamp(0.0, 100.0) / 100.0 * (H - 2.0 * M);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).expect("string write");
    let (x0, x1, y0, y1) = (x(0.0), x(100.0), y(0.0), y(100.0));
    writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#).expect("string write");
    for t in (0..=100).step_by(20) {
        let t = t as f64;
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{t}</text><text x="{}" y="{}" text-anchor="end">{t}</text>"#,
            x(t),
            y0 + 16.0,
            x0 - 6.0,
            y(t) + 4.0
        )
        .expect("string write");
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">EER-lazy (%)</text>"#,
        (x0 + x1) / 2.0,
        H - 10.0
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">UAR (%)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    )
    .expect("string write");
    for r in rows {
        let (px, py) = (x(r.eer_lazy), y(r.uar));
        writeln!(
            s,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="4" fill="darkorange"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            px + 6.0,
            py - 6.0,
            escape(&r.experiment)
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}
