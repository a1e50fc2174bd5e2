//! Handwritten SVG: a Gantt chart of a schedule (one row per device) and a
//! grouped bar chart for cost tables.

use std::fmt::Write;

use super::{EventKind, ScheduleTrace};

const ROW_H: f64 = 28.0;
const LABEL_W: f64 = 90.0;
const PLOT_W: f64 = 1000.0;

fn fill(kind: EventKind) -> &'static str {
    match kind {
        EventKind::FwdCell => "#4e79a7",
        EventKind::BwdCell => "#59a14f",
        EventKind::AllReduce => "#f28e2b",
        EventKind::CacheLoad => "#9c9c9c",
        EventKind::Redistribute => "#b07aa1",
        _ => "#e15759",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Compute cells, all-reduces and cache loads get a full-height box;
/// transfers a thin strip at the bottom of the row. Cells carry their
/// micro-batch id.
pub fn render_svg(trace: &ScheduleTrace) -> String {
    let rows = trace.device_ids.len();
    let height = ROW_H * rows as f64 + 30.0;
    let width = LABEL_W + PLOT_W + 10.0;
    let scale = if trace.makespan_us == 0 { 0.0 } else { PLOT_W / trace.makespan_us as f64 };
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    )
    .unwrap();
    for (i, id) in trace.device_ids.iter().enumerate() {
        let y = ROW_H * i as f64;
        writeln!(out, r#"<text class="lane" x="4" y="{:.1}">{}</text>"#, y + ROW_H * 0.6, escape(id)).unwrap();
        writeln!(
            out,
            r##"<line x1="{LABEL_W}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            y + ROW_H,
            LABEL_W + PLOT_W,
            y + ROW_H
        )
        .unwrap();
    }
    for e in &trace.events {
        if e.end_us == e.start_us {
            continue;
        }
        let x = LABEL_W + e.start_us as f64 * scale;
        let w = ((e.end_us - e.start_us) as f64 * scale).max(0.5);
        let row = ROW_H * e.device as f64;
        let (y, h) = match e.kind {
            EventKind::SendAct | EventKind::SendGrad => (row + ROW_H - 6.0, 4.0),
            _ => (row + 2.0, ROW_H - 10.0),
        };
        let class = e.kind.name();
        writeln!(
            out,
            r#"<rect class="{class}" x="{x:.2}" y="{y:.1}" width="{w:.2}" height="{h:.1}" fill="{}" stroke="white" stroke-width="0.5"/>"#,
            fill(e.kind)
        )
        .unwrap();
        let label = match (e.kind, e.micro_batch) {
            (EventKind::FwdCell | EventKind::BwdCell, Some(m)) => Some(m.to_string()),
            (EventKind::AllReduce, _) => Some("AR".to_string()),
            _ => None,
        };
        if let Some(label) = label {
            writeln!(
                out,
                r#"<text class="cell {class}" x="{:.2}" y="{:.1}" fill="white" text-anchor="middle">{label}</text>"#,
                x + w / 2.0,
                row + ROW_H * 0.55
            )
            .unwrap();
        }
    }
    writeln!(
        out,
        r#"<text x="{LABEL_W}" y="{:.1}">makespan {:.3} ms</text>"#,
        height - 8.0,
        trace.makespan_us as f64 / 1000.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per category, one bar per series.
pub fn render_bar_chart(title: &str, unit: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];
    let plot_h = 240.0;
    let group_w = 40.0 + 26.0 * series.len() as f64;
    let width = 80.0 + group_w * categories.len() as f64 + 160.0;
    let height = plot_h + 90.0;
    let max = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(out, r#"<text x="10" y="18" font-size="14">{}</text>"#, escape(title)).unwrap();
    writeln!(out, r#"<text x="10" y="34">max {max:.3} {}</text>"#, escape(unit)).unwrap();
    let base = 40.0 + plot_h;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = 80.0 + group_w * ci as f64;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0);
            let h = v / max * plot_h;
            writeln!(
                out,
                r#"<rect class="bar" x="{:.1}" y="{:.1}" width="22" height="{h:.1}" fill="{}"><title>{v:.4} {}</title></rect>"#,
                gx + 26.0 * si as f64,
                base - h,
                PALETTE[si % PALETTE.len()],
                escape(unit)
            )
            .unwrap();
        }
        writeln!(out, r#"<text x="{gx:.1}" y="{:.1}">{}</text>"#, base + 16.0, escape(cat)).unwrap();
    }
    let lx = 80.0 + group_w * categories.len() as f64 + 10.0;
    for (si, (name, _)) in series.iter().enumerate() {
        let y = 50.0 + 18.0 * si as f64;
        writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#,
            y - 10.0,
            PALETTE[si % PALETTE.len()]
        )
        .unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, lx + 16.0, escape(name)).unwrap();
    }
    out.push_str("</svg>\n");
    out
}
