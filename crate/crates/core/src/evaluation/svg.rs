//! Minimal static SVG charts: axes, ticks, legend.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (LEFT + W - RIGHT) / 2.0, esc(title));
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 15.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (y0 + y1) / 2.0,
        esc(y_label)
    );
}

fn legend(s: &mut String, names: &[String], swatch_rect: bool) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = W - RIGHT + 15.0;
        let c = PALETTE[i % PALETTE.len()];
        if swatch_rect {
            let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="14" height="10" fill="{c}"/>"#, y - 9.0);
        } else {
            let _ = writeln!(s, r#"<line x1="{x}" y1="{0}" x2="{1}" y2="{0}" stroke="{c}" stroke-width="2"/>"#, y - 4.0, x + 14.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 20.0, esc(n));
    }
}

fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|&m| m >= v).unwrap_or(10.0 * mag)
}

/// One polyline per series of `(x, y)` points. The y axis starts at 0.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = || series.iter().flat_map(|(_, p)| p.iter());
    let (mut xmin, mut xmax) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if !xmin.is_finite() {
        (xmin, xmax) = (0.0, 1.0);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    let ymax = nice_max(pts().map(|p| p.1).fold(0.0, f64::max));
    let px = |x: f64| LEFT + (x - xmin) / (xmax - xmin) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - y / ymax * (H - TOP - BOTTOM);

    let mut s = open(title);
    axes(&mut s, x_label, y_label);
    for k in 0..=5 {
        let y = ymax * k as f64 / 5.0;
        let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#, LEFT - 4.0, py(y), LEFT);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 7.0, py(y) + 4.0, fmt_tick(y));
    }
    let mut xs: Vec<f64> = pts().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#, px(x), H - BOTTOM, H - BOTTOM + 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(x), H - BOTTOM + 18.0, fmt_tick(x));
    }
    for (i, (_, p)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        for &(x, y) in p {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, px(x), py(y));
        }
    }
    legend(&mut s, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(), false);
    s.push_str("</svg>\n");
    s
}

/// One bar per category, stacked from `values[category][segment]`.
pub fn stacked_bar_chart(title: &str, y_label: &str, categories: &[String], segments: &[String], values: &[Vec<f64>]) -> String {
    let ymax = nice_max(values.iter().map(|v| v.iter().sum::<f64>()).fold(0.0, f64::max));
    let plot_w = W - LEFT - RIGHT;
    let slot = plot_w / categories.len().max(1) as f64;
    let bar = slot * 0.6;
    let py = |y: f64| H - BOTTOM - y / ymax * (H - TOP - BOTTOM);

    let mut s = open(title);
    axes(&mut s, "", y_label);
    for k in 0..=5 {
        let y = ymax * k as f64 / 5.0;
        let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#, LEFT - 4.0, py(y), LEFT);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 7.0, py(y) + 4.0, fmt_tick(y));
    }
    for (ci, (cat, vals)) in categories.iter().zip(values).enumerate() {
        let x = LEFT + slot * ci as f64 + (slot - bar) / 2.0;
        let mut base = 0.0;
        for (si, v) in vals.iter().enumerate() {
            let c = PALETTE[si % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar:.2}" height="{:.2}" fill="{c}"><title>{}: {}</title></rect>"#,
                py(base + v),
                py(base) - py(base + v),
                esc(segments.get(si).map_or("", String::as_str)),
                fmt_tick(*v)
            );
            base += v;
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x + bar / 2.0, H - BOTTOM + 18.0, esc(cat));
    }
    legend(&mut s, segments, true);
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
