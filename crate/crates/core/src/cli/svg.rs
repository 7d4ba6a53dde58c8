//! Native SVG line charts of gap against cumulative cost.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(cost, gap, se)` triples in drawing order.
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub y_scale: Scale,
    pub series: Vec<Series>,
}

impl Chart {
    pub fn gap_vs_cost(series: Vec<Series>) -> Self {
        Chart {
            title: "Reward gap vs. cumulative cost".to_string(),
            x_label: "cumulative cost".to_string(),
            y_label: "reward gap".to_string(),
            y_scale: Scale::Log,
            series,
        }
    }
}

/// Fixed-precision coordinate, so output bytes never depend on float noise.
fn c(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = super::table::format_real(v);
    if s.len() > 8 {
        format!("{v:.2e}")
    } else {
        s
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
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
            hi = hi.ceil();
        } else {
            lo = lo.min(0.0);
        }
        if hi - lo <= 0.0 {
            hi = lo + 1.0;
        }
        Axis { lo, hi, log }
    }

    /// Position of `v` in `[0, 1]`, or `None` when it cannot be drawn.
    fn frac(&self, v: f64) -> Option<f64> {
        let v = if self.log {
            if v <= 0.0 {
                return None;
            }
            v.log10()
        } else {
            v
        };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (lo, hi) = (self.lo as i32, self.hi as i32);
            let step = ((hi - lo) as f64 / 8.0).ceil().max(1.0) as i32;
            (lo..=hi).step_by(step as usize).map(|e| 10f64.powi(e)).collect()
        } else {
            let raw = (self.hi - self.lo) / 6.0;
            let magnitude = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0]
                .iter()
                .map(|m| m * magnitude)
                .find(|s| *s >= raw)
                .unwrap_or(10.0 * magnitude);
            let first = (self.lo / step).ceil() as i64;
            let last = (self.hi / step).floor() as i64;
            (first..=last).map(|k| k as f64 * step).collect()
        }
    }
}

pub fn render(chart: &Chart) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let log = chart.y_scale == Scale::Log;
    let points = || chart.series.iter().flat_map(|s| s.points.iter());
    let x_axis = Axis::new(points().map(|p| p.0), false);
    let y_axis = Axis::new(
        points().flat_map(|p| [p.1, p.1 + p.2, if log { p.1 } else { p.1 - p.2 }]),
        log,
    );
    let px = |x: f64| x_axis.frac(x).map(|f| LEFT + f * plot_w);
    let py = |y: f64| y_axis.frac(y).map(|f| TOP + (1.0 - f.clamp(-0.05, 1.05)) * plot_h);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        c(LEFT + plot_w / 2.0),
        escape(&chart.title)
    );
    let _ = writeln!(
        out,
        r##"<defs><clipPath id="plot"><rect x="{}" y="{}" width="{}" height="{}"/></clipPath></defs>"##,
        c(LEFT),
        c(TOP),
        c(plot_w),
        c(plot_h)
    );

    for tick in x_axis.ticks() {
        if let Some(x) = px(tick) {
            let _ = writeln!(
                out,
                r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#dddddd"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"##,
                c(TOP),
                c(TOP + plot_h),
                c(TOP + plot_h + 16.0),
                tick_label(tick),
                x = c(x)
            );
        }
    }
    for tick in y_axis.ticks() {
        if let Some(y) = py(tick) {
            let _ = writeln!(
                out,
                r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{y}" text-anchor="end" dominant-baseline="middle">{}</text>"##,
                c(LEFT),
                c(LEFT + plot_w),
                c(LEFT - 6.0),
                tick_label(tick),
                y = c(y)
            );
        }
    }
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#333333"/>"##,
        c(LEFT),
        c(TOP),
        c(plot_w),
        c(plot_h)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        c(LEFT + plot_w / 2.0),
        c(HEIGHT - 20.0),
        escape(&chart.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="20" y="{y}" text-anchor="middle" transform="rotate(-90 20 {y})">{}{}</text>"#,
        escape(&chart.y_label),
        if log { " (log)" } else { "" },
        y = c(TOP + plot_h / 2.0)
    );

    for (i, series) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut upper = Vec::new();
        let mut lower = Vec::new();
        let mut line = Vec::new();
        for &(x, y, se) in &series.points {
            let Some(x) = px(x) else { continue };
            if let Some(yy) = py(y) {
                line.push(format!("{},{}", c(x), c(yy)));
            }
            let hi = py(y + se);
            let lo = py(y - se).or_else(|| py(y).map(|_| TOP + plot_h));
            if let (Some(hi), Some(lo)) = (hi, lo) {
                upper.push(format!("{},{}", c(x), c(hi)));
                lower.push(format!("{},{}", c(x), c(lo)));
            }
        }
        if !upper.is_empty() {
            lower.reverse();
            upper.extend(lower);
            let _ = writeln!(
                out,
                r#"<polygon clip-path="url(#plot)" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" ")
            );
        }
        if !line.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline clip-path="url(#plot)" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + plot_w + 15.0;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{y}" dominant-baseline="middle">{}</text>"#,
            c(lx),
            c(lx + 24.0),
            c(lx + 30.0),
            escape(&series.label),
            y = c(ly)
        );
    }
    out.push_str("</svg>\n");
    out
}
