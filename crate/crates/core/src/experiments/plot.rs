use std::fmt::Write;

use super::records::{pareto_frontier, ResultsTable, RunRecord};
use crate::error::{Error, Result};
use crate::pipeline::{QuantMethod, TaskKind};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn color(method: QuantMethod) -> &'static str {
    match method {
        QuantMethod::Uniform => "#1f77b4",
        QuantMethod::Rtn => "#2ca02c",
        QuantMethod::Gptq => "#d62728",
        QuantMethod::Awq => "#9467bd",
    }
}

struct Axes {
    x_lo: f64,
    x_hi: f64,
}

impl Axes {
    fn x(&self, bpw: f64) -> f64 {
        LEFT + (bpw - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, score: f64) -> f64 {
        HEIGHT - BOTTOM - score * (HEIGHT - TOP - BOTTOM)
    }
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    (0..10)
        .map(|i| {
            let radius = if i % 2 == 0 { r } else { r * 0.45 };
            let angle = std::f64::consts::PI * (i as f64 / 5.0 - 0.5);
            format!("{:.2},{:.2}", cx + radius * angle.cos(), cy + radius * angle.sin())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Score-vs-bpw scatter for one task: one circle per record coloured by
/// method, the Pareto frontier as a polyline and star glyphs over
/// full-pipeline 8- and 16-bit cells.
pub fn render_svg(table: &ResultsTable, task: TaskKind) -> Result<String> {
    let slice = table.for_task(task);
    if slice.is_empty() {
        return Err(Error::InvalidArgument(format!("no rows for task {task}")));
    }
    let present = table.present_components();
    let lo = slice.records.iter().map(|r| r.bpw).fold(f64::INFINITY, f64::min).floor();
    let hi = slice.records.iter().map(|r| r.bpw).fold(f64::NEG_INFINITY, f64::max).ceil();
    let axes = Axes { x_lo: lo.min(hi - 1.0).max(0.0), x_hi: hi.max(lo + 1.0) };

    let mut s = String::new();
    let w = &mut s;
    writeln!(w, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(w, r#"<text x="{}" y="22" font-size="14" text-anchor="middle">Performance-size tradeoff ({task})</text>"#, WIDTH / 2.0).unwrap();

    let (x0, x1) = (axes.x(axes.x_lo), axes.x(axes.x_hi));
    let (y0, y1) = (axes.y(0.0), axes.y(1.0));
    writeln!(w, r#"<g class="axes" stroke="black" fill="none">"#).unwrap();
    writeln!(w, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/>"#).unwrap();
    writeln!(w, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/>"#).unwrap();
    writeln!(w, "</g>").unwrap();
    let span = axes.x_hi - axes.x_lo;
    let step = if span > 8.0 { 2.0 } else { 1.0 };
    let mut t = axes.x_lo;
    while t <= axes.x_hi + 1e-9 {
        writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#, axes.x(t), y0 + 16.0).unwrap();
        t += step;
    }
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, x0 - 6.0, axes.y(v) + 4.0).unwrap();
    }
    writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">bits per weight</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0).unwrap();
    writeln!(
        w,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">fidelity score</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    )
    .unwrap();

    let front = pareto_frontier(table, task);
    let pts: Vec<String> =
        front.records.iter().map(|r| format!("{:.2},{:.2}", axes.x(r.bpw), axes.y(r.score))).collect();
    writeln!(w, r##"<polyline class="frontier" fill="none" stroke="#333333" stroke-width="1.5" points="{}"/>"##, pts.join(" ")).unwrap();

    let mut rows: Vec<&RunRecord> = slice.records.iter().collect();
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.seed.cmp(&b.seed)));
    for r in &rows {
        writeln!(
            w,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"><title>{} {}</title></circle>"#,
            axes.x(r.bpw),
            axes.y(r.score),
            color(r.method),
            r.run_id,
            r.method
        )
        .unwrap();
    }
    for r in rows.iter().filter(|r| r.is_full_pipeline(&present)) {
        writeln!(w, r#"<polygon class="star" fill="black" points="{}"/>"#, star(axes.x(r.bpw), axes.y(r.score), 8.0)).unwrap();
    }

    let methods: std::collections::BTreeSet<QuantMethod> = rows.iter().map(|r| r.method).collect();
    for (i, m) in methods.iter().enumerate() {
        let y = TOP + 10.0 + i as f64 * 18.0;
        writeln!(w, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#, WIDTH - RIGHT + 20.0, y - 9.0, color(*m)).unwrap();
        writeln!(w, r#"<text x="{:.2}" y="{y:.2}">{m}</text>"#, WIDTH - RIGHT + 36.0).unwrap();
    }
    writeln!(w, "</svg>").unwrap();
    Ok(s)
}
