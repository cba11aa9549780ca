//! Static SVG charts: line plots (optionally log-scale, with shaded bands)
//! and grouped bar charts.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dashed: bool,
}

/// Shaded region between two curves sharing the x values.
#[derive(Debug, Clone)]
pub struct ShadedBand {
    pub name: String,
    pub x: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Axes {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
}

/// Maps data values to plot coordinates.
struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
    from: f64,
    to: f64,
}

impl Scale {
    fn new(values: impl Iterator<Item = f64>, log: bool, from: f64, to: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil().max(lo + 1.0);
        } else if hi - lo < 1e-300 {
            let pad = if lo == 0.0 { 1.0 } else { 0.05 * lo.abs() };
            lo -= pad;
            hi += pad;
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, log, from, to }
    }

    fn map(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some(self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo as i32, self.hi as i32);
            let step = ((b - a) / 8).max(1);
            (a..=b)
                .step_by(step as usize)
                .map(|e| (10f64.powi(e), format!("1e{e}")))
                .collect()
        } else {
            (0..=5)
                .map(|k| {
                    let v = self.lo + (self.hi - self.lo) * k as f64 / 5.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

fn frame(out: &mut String, axes: &Axes, xs: &Scale, ys: &Scale) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for (v, label) in ys.ticks() {
        if let Some(y) = ys.map(v) {
            let _ = writeln!(
                out,
                r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{label}</text>"##,
                x0 - 6.0,
                y + 4.0
            );
        }
    }
    for (v, label) in xs.ticks() {
        if let Some(x) = xs.map(v) {
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{label}</text>"#,
                y0 + 5.0,
                y0 + 20.0
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0,
        escape(&axes.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(&axes.y_label)
    );
}

fn legend(out: &mut String, k: usize, name: &str, color: &str, dashed: bool, filled: bool) {
    let x = WIDTH - RIGHT + 12.0;
    let y = TOP + 10.0 + 20.0 * k as f64;
    if filled {
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="22" height="10" fill="{color}" fill-opacity="0.35"/>"#,
            y - 5.0
        );
    } else {
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
            x + 22.0
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 28.0, y + 4.0, escape(name));
}

pub fn line_chart(axes: &Axes, series: &[Series], bands: &[ShadedBand]) -> String {
    let xs = Scale::new(
        series.iter().flat_map(|s| s.x.iter().copied()).chain(bands.iter().flat_map(|b| b.x.iter().copied())),
        false,
        LEFT,
        WIDTH - RIGHT,
    );
    let ys = Scale::new(
        series
            .iter()
            .flat_map(|s| s.y.iter().copied())
            .chain(bands.iter().flat_map(|b| b.lower.iter().chain(&b.upper).copied())),
        axes.log_y,
        HEIGHT - BOTTOM,
        TOP,
    );
    let mut out = String::new();
    header(&mut out, &axes.title);
    frame(&mut out, axes, &xs, &ys);
    let mut k = 0;
    for (i, b) in bands.iter().enumerate() {
        let color = PALETTE[(i + 3) % PALETTE.len()];
        let upper: Vec<String> = b
            .x
            .iter()
            .zip(&b.upper)
            .filter_map(|(x, y)| Some(format!("{:.2},{:.2}", xs.map(*x)?, ys.map(*y)?)))
            .collect();
        let lower: Vec<String> = b
            .x
            .iter()
            .zip(&b.lower)
            .rev()
            .filter_map(|(x, y)| Some(format!("{:.2},{:.2}", xs.map(*x)?, ys.map(*y)?)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.35" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        legend(&mut out, k, &b.name, color, false, true);
        k += 1;
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .x
            .iter()
            .zip(&s.y)
            .filter_map(|(x, y)| Some(format!("{:.2},{:.2}", xs.map(*x)?, ys.map(*y)?)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            pts.join(" ")
        );
        if s.x.len() <= 40 {
            for p in &pts {
                let (x, y) = p.split_once(',').expect("formatted point");
                let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
            }
        }
        legend(&mut out, k, &s.name, color, s.dashed, false);
        k += 1;
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: `values[group][series]`.
pub fn bar_chart(axes: &Axes, groups: &[String], series_names: &[String], values: &[Vec<f64>]) -> String {
    let ys = Scale::new(values.iter().flatten().copied(), axes.log_y, HEIGHT - BOTTOM, TOP);
    let mut out = String::new();
    header(&mut out, &axes.title);
    let group_width = (WIDTH - RIGHT - LEFT) / groups.len().max(1) as f64;
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for (v, label) in ys.ticks() {
        if let Some(y) = ys.map(v) {
            let _ = writeln!(
                out,
                r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{label}</text>"##,
                x0 - 6.0,
                y + 4.0
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(&axes.y_label)
    );
    let n = series_names.len().max(1) as f64;
    let bar = 0.8 * group_width / n;
    let base = if axes.log_y { y0 } else { ys.map(0.0).unwrap_or(y0).clamp(y1, y0) };
    for (g, name) in groups.iter().enumerate() {
        let gx = LEFT + g as f64 * group_width;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_width / 2.0,
            y0 + 20.0,
            escape(name)
        );
        for (s, v) in values.get(g).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            let Some(top) = ys.map(*v) else { continue };
            let (ya, yb) = if top < base { (top, base) } else { (base, top) };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{ya:.2}" width="{bar:.2}" height="{:.2}" fill="{}"/>"#,
                gx + 0.1 * group_width + s as f64 * bar,
                yb - ya,
                PALETTE[s % PALETTE.len()]
            );
        }
    }
    for (s, name) in series_names.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let x = WIDTH - RIGHT + 12.0;
        let y = TOP + 10.0 + 20.0 * s as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="14" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            y - 5.0,
            x + 20.0,
            y + 4.0,
            escape(name)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0,
        escape(&axes.x_label)
    );
    out.push_str("</svg>\n");
    out
}
