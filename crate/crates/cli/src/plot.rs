//! Minimal SVG charts.

use std::fmt::Write;

use trackverify::metrics::{ErrorCurve, EvalReport};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"];

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
"#,
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, ymax: f64, ylabel: &str) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD, PAD);
    let _ = writeln!(out, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y + 4.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
}

/// Per-frame error of each method on one track; occluded frames shaded.
pub fn error_curves(curves: &[(String, ErrorCurve)], track: usize) -> String {
    let mut out = String::new();
    header(&mut out, &format!("Per-frame error, track {track}"));
    let len = curves.first().map_or(0, |c| c.1.errors.len()).max(1);
    let ymax = curves.iter().flat_map(|c| c.1.errors.iter().copied()).fold(1.0, f64::max);
    let xs = |i: usize| PAD + (W - 2.0 * PAD) * if len > 1 { i as f64 / (len - 1) as f64 } else { 0.5 };
    let ys = |e: f64| H - PAD - (H - 2.0 * PAD) * e / ymax;
    if let Some((_, c)) = curves.first() {
        let step = (W - 2.0 * PAD) / len.max(2).saturating_sub(1) as f64;
        for (i, occ) in c.occluded.iter().enumerate() {
            if *occ {
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{PAD}\" width=\"{step:.2}\" height=\"{}\" fill=\"#ddd\"/>",
                    xs(i) - step / 2.0,
                    H - 2.0 * PAD
                );
            }
        }
    }
    axes(&mut out, ymax, "error (px)");
    for (k, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c.errors.iter().enumerate().map(|(i, e)| format!("{:.2},{:.2}", xs(i), ys(*e))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 130.0,
            PAD + 14.0 * (k + 1) as f64,
            escape(name)
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">frame</text>"#, W / 2.0, H - 12.0);
    out.push_str("</svg>\n");
    out
}

/// Threshold accuracy per method.
pub fn bar_chart(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    header(&mut out, "Average threshold accuracy by selector");
    axes(&mut out, 1.0, "delta_avg");
    let n = reports.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (k, r) in reports.iter().enumerate() {
        let h = (H - 2.0 * PAD) * r.delta_avg;
        let x = PAD + slot * k as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            H - PAD - h,
            slot * 0.7,
            COLORS[k % COLORS.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            x + slot * 0.35,
            H - PAD + 14.0,
            escape(&r.method)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{:.3}</text>"#,
            x + slot * 0.35,
            H - PAD - h - 4.0,
            r.delta_avg
        );
    }
    out.push_str("</svg>\n");
    out
}
