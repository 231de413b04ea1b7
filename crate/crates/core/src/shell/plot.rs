//! Minimal SVG line and scatter plots.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Frame { x: range(&mut xs.clone()), y: range(&mut ys.clone()) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    let (w, h, m) = (WIDTH, HEIGHT, MARGIN);
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#)
        .unwrap();
    writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title))
        .unwrap();
    writeln!(out, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(out, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        w / 2.0,
        h - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (value, x, y, anchor) in [
        (frame.x.0, m, h - m + 15.0, "start"),
        (frame.x.1, w - m, h - m + 15.0, "end"),
        (frame.y.0, m - 4.0, h - m, "end"),
        (frame.y.1, m - 4.0, m + 4.0, "end"),
    ] {
        writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{value:.4}</text>"#).unwrap();
    }
}

/// One polyline per series, plotted against step index `1..`.
pub fn line_plot(series: &[Vec<f64>], title: &str, x_label: &str, y_label: &str) -> String {
    let frame = Frame::fit(
        series.iter().flat_map(|s| (1..=s.len()).map(|i| i as f64)),
        series.iter().flat_map(|s| s.iter().copied()),
    );
    let mut out = String::new();
    header(&mut out, &frame, title, x_label, y_label);
    for (k, s) in series.iter().enumerate() {
        let points: Vec<String> =
            s.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", frame.px((i + 1) as f64), frame.py(v))).collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1" stroke-opacity="0.6" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            points.join(" ")
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of `(x, y, class)` points, one colour per class in order of
/// first appearance, with a legend.
pub fn scatter_plot(points: &[(f64, f64, String)], title: &str, x_label: &str, y_label: &str) -> String {
    let frame = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut classes: Vec<&str> = Vec::new();
    for p in points {
        if !classes.contains(&p.2.as_str()) {
            classes.push(&p.2);
        }
    }
    let mut out = String::new();
    header(&mut out, &frame, title, x_label, y_label);
    for (x, y, class) in points {
        let colour = PALETTE[classes.iter().position(|c| c == class).unwrap_or(0) % PALETTE.len()];
        writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#, frame.px(*x), frame.py(*y)).unwrap();
    }
    for (k, class) in classes.iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        writeln!(
            out,
            r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/>"#,
            WIDTH - MARGIN - 70.0,
            PALETTE[k % PALETTE.len()]
        )
        .unwrap();
        writeln!(out, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, WIDTH - MARGIN - 60.0, y + 4.0, escape(class))
            .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
