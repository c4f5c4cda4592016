//! Minimal SVG scatter of accuracy against mean cost fraction.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub label: String,
    pub cost: f64,
    pub accuracy: f64,
    pub oracle: bool,
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const M: f64 = 60.0;

pub fn tradeoff_svg(points: &[PlotPoint], title: &str) -> String {
    let accs = points.iter().map(|p| p.accuracy);
    let lo = accs.clone().fold(f64::INFINITY, f64::min);
    let hi = accs.fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if points.is_empty() {
        (0.0, 1.0)
    } else {
        let pad = ((hi - lo) * 0.1).max(0.01);
        ((lo - pad).max(0.0), (hi + pad).min(1.0))
    };
    let x = |c: f64| M + c.clamp(0.0, 1.0) * (W - 2.0 * M);
    let y = |a: f64| H - M - (a - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    for i in 0..=5 {
        let c = i as f64 / 5.0;
        let a = y0 + (y1 - y0) * c;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{c:.1}</text>"#,
            x(c),
            H - M + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{a:.3}</text>"#,
            M - 6.0,
            y(a) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">mean cost fraction</text>"#,
        W / 2.0,
        H - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {})">accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    let line: Vec<String> = points
        .iter()
        .filter(|p| !p.oracle)
        .map(|p| format!("{:.2},{:.2}", x(p.cost), y(p.accuracy)))
        .collect();
    if line.len() > 1 {
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#, line.join(" "));
    }
    for p in points {
        let (cx, cy) = (x(p.cost), y(p.accuracy));
        if p.oracle {
            let _ = writeln!(s, r#"<polygon class="oracle" points="{}" fill="crimson"/>"#, star(cx, cy, 8.0));
        } else {
            let _ = writeln!(s, r#"<circle class="threshold" cx="{cx:.2}" cy="{cy:.2}" r="4" fill="steelblue"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            cx + 6.0,
            cy - 6.0,
            escape(&p.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    (0..10)
        .map(|k| {
            let rad = if k % 2 == 0 { r } else { r * 0.45 };
            let ang = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
            format!("{:.2},{:.2}", cx + rad * ang.cos(), cy + rad * ang.sin())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
