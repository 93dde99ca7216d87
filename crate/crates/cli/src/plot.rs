//! Static SVG figures. Pure post-processing of a finished run.

use std::fmt::Write as _;

use swarm_pddp::consensus::SwarmSolution;
use swarm_pddp::scenarios::ScenarioConfig;

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Maps data coordinates onto the canvas with equal axis scaling.
struct Frame {
    x0: f64,
    y1: f64,
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit(min: (f64, f64), max: (f64, f64)) -> Self {
        let span_x = (max.0 - min.0).max(1.0);
        let span_y = (max.1 - min.1).max(1.0);
        let scale = (WIDTH - 2.0 * MARGIN) / span_x;
        Self {
            x0: min.0,
            y1: max.1,
            scale,
            height: span_y * scale + 2.0 * MARGIN,
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (MARGIN + (x - self.x0) * self.scale, MARGIN + (self.y1 - y) * self.scale)
    }
}

fn header(out: &mut String, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height:.1}" viewBox="0 0 {WIDTH} {height:.1}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

/// Paths, start and end markers, obstacles with their safety annulus, and
/// communication range around each start point.
pub fn trajectories_svg(solution: &SwarmSolution, cfg: &ScenarioConfig) -> String {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut grow = |x: f64, y: f64, r: f64| {
        min = (min.0.min(x - r), min.1.min(y - r));
        max = (max.0.max(x + r), max.1.max(y + r));
    };
    for t in &solution.trajectories {
        for s in &t.states {
            grow(s.x, s.y, 0.0);
        }
    }
    for o in &cfg.obstacles {
        grow(o.center.x, o.center.y, o.radius + cfg.d_obstacle_safe);
    }
    let f = Frame::fit(min, max);
    let mut out = String::new();
    header(&mut out, f.height);

    for o in &cfg.obstacles {
        let (cx, cy) = f.px(o.center.x, o.center.y);
        let _ = writeln!(
            out,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" fill="none" stroke="#999" stroke-dasharray="4 3"/>"##,
            (o.radius + cfg.d_obstacle_safe) * f.scale
        );
        let _ = writeln!(
            out,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" fill="#ccc" stroke="#666"/>"##,
            o.radius * f.scale
        );
    }
    for (i, t) in solution.trajectories.iter().enumerate() {
        let c = color(i);
        let (sx, sy) = f.px(t.states[0].x, t.states[0].y);
        let _ = writeln!(
            out,
            r#"<circle cx="{sx:.2}" cy="{sy:.2}" r="{:.2}" fill="none" stroke="{c}" stroke-opacity="0.25" stroke-dasharray="2 4"/>"#,
            cfg.d_comm * f.scale
        );
        let points: Vec<String> = t
            .states
            .iter()
            .map(|s| {
                let (x, y) = f.px(s.x, s.y);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let last = t.final_state();
        let (ex, ey) = f.px(last.x, last.y);
        let _ = writeln!(out, r#"<circle cx="{sx:.2}" cy="{sy:.2}" r="3" fill="{c}"/>"#);
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{c}"/>"#,
            ex - 3.0,
            ey - 3.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{c}">{}</text>"#,
            sx + 5.0,
            sy - 5.0,
            i + 1
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Final time of every agent against the outer iteration.
pub fn times_svg(solution: &SwarmSolution) -> String {
    let height = 400.0;
    let mut out = String::new();
    header(&mut out, height);
    let trace = &solution.trace;
    if trace.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let (lo, hi) = trace
        .iter()
        .flat_map(|r| r.final_times.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    let span = (hi - lo).max(1e-3);
    let n = trace.len().max(2) as f64 - 1.0;
    let px = |it: usize, t: f64| {
        (
            MARGIN + (it as f64 - 1.0) / n * (WIDTH - 2.0 * MARGIN),
            height - MARGIN - (t - lo) / span * (height - 2.0 * MARGIN),
        )
    };
    let _ = writeln!(
        out,
        r##"<text x="{MARGIN}" y="{:.1}" font-size="11" fill="#333">{hi:.3} s</text>"##,
        MARGIN - 8.0
    );
    let _ = writeln!(
        out,
        r##"<text x="{MARGIN}" y="{:.1}" font-size="11" fill="#333">{lo:.3} s</text>"##,
        height - MARGIN + 14.0
    );
    let agents = trace[0].final_times.len();
    for i in 0..agents {
        let points: Vec<String> = trace
            .iter()
            .map(|r| {
                let (x, y) = px(r.iteration, r.final_times[i]);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
            points.join(" "),
            color(i)
        );
    }
    out.push_str("</svg>\n");
    out
}
