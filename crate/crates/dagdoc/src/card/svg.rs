//! Hand-emitted inline SVG: a bar chart, a multi-series line chart, and
//! the wave-columnar DAG drawing. Everything is rendered from sorted
//! data with fixed-precision coordinates so output is byte-stable.

use crate::flow::ValidatedFlow;

use super::html::escape_html;

/// Line/legend colors, assigned in order. Cycles when exhausted.
pub const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

pub fn color(index: usize) -> &'static str {
    PALETTE[index % PALETTE.len()]
}

fn coord(v: f64) -> String {
    format!("{v:.2}")
}

/// Compact deterministic number label for axes and bars.
pub fn fmt_label(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e12 {
        return format!("{v:.0}");
    }
    let text = format!("{v:.4}");
    let trimmed = text.trim_end_matches('0').trim_end_matches('.');
    if trimmed.is_empty() || trimmed == "-" {
        "0".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Bar chart of (label, count) pairs, tallest bar filling the plot
/// height. Callers pass data already sorted for display.
pub fn bar_chart(data: &[(String, usize)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 240.0;
    const PAD_TOP: f64 = 24.0;
    const PAD_BOTTOM: f64 = 28.0;
    let plot_h = H - PAD_TOP - PAD_BOTTOM;
    let max = data.iter().map(|(_, n)| *n).max().unwrap_or(1).max(1) as f64;
    let slot = W / data.len().max(1) as f64;
    let bar_w = (slot * 0.6).min(80.0);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg viewBox=\"0 0 {W} {H}\" width=\"{W}\" height=\"{H}\" role=\"img\">"
    ));
    for (i, (label, count)) in data.iter().enumerate() {
        let h = plot_h * (*count as f64) / max;
        let x = slot * i as f64 + (slot - bar_w) / 2.0;
        let y = PAD_TOP + plot_h - h;
        let cx = slot * i as f64 + slot / 2.0;
        s.push_str(&format!(
            "<rect class=\"bar\" data-user=\"{}\" data-count=\"{count}\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>",
            escape_html(label),
            coord(x),
            coord(y),
            coord(bar_w),
            coord(h),
            color(0),
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{count}</text>",
            coord(cx),
            coord(y - 6.0),
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            coord(cx),
            coord(H - 10.0),
            escape_html(label),
        ));
    }
    s.push_str("</svg>");
    s
}

/// One named line per run on shared linear axes. `series` holds
/// (run label, sorted (epoch, value) points); ranges span the union.
pub fn line_chart(series: &[(String, Vec<(u64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const PAD_L: f64 = 56.0;
    const PAD_R: f64 = 16.0;
    const PAD_T: f64 = 16.0;
    const PAD_B: f64 = 36.0;
    let plot_w = W - PAD_L - PAD_R;
    let plot_h = H - PAD_T - PAD_B;

    let mut e_min = u64::MAX;
    let mut e_max = 0u64;
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for (_, points) in series {
        for (e, v) in points {
            e_min = e_min.min(*e);
            e_max = e_max.max(*e);
            v_min = v_min.min(*v);
            v_max = v_max.max(*v);
        }
    }
    if e_min > e_max {
        e_min = 0;
        e_max = 1;
    }
    if !v_min.is_finite() || !v_max.is_finite() {
        v_min = 0.0;
        v_max = 1.0;
    }
    let e_span = (e_max - e_min).max(1) as f64;
    let v_span = if v_max > v_min { v_max - v_min } else { 1.0 };
    let x_of = |e: u64| PAD_L + plot_w * (e - e_min) as f64 / e_span;
    let y_of = |v: f64| PAD_T + plot_h * (1.0 - (v - v_min) / v_span);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg viewBox=\"0 0 {W} {H}\" width=\"{W}\" height=\"{H}\" role=\"img\">"
    ));
    // axes
    s.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#444\"/>",
        l = coord(PAD_L),
        t = coord(PAD_T),
        b = coord(PAD_T + plot_h),
    ));
    s.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#444\"/>",
        l = coord(PAD_L),
        b = coord(PAD_T + plot_h),
        r = coord(W - PAD_R),
    ));
    // axis extent labels
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        coord(PAD_L),
        coord(H - 14.0),
        e_min,
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        coord(W - PAD_R),
        coord(H - 14.0),
        e_max,
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"12\">{}</text>",
        coord(PAD_L - 6.0),
        coord(PAD_T + plot_h),
        escape_html(&fmt_label(v_min)),
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"12\">{}</text>",
        coord(PAD_L - 6.0),
        coord(PAD_T + 10.0),
        escape_html(&fmt_label(v_max)),
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">epoch</text>",
        coord(PAD_L + plot_w / 2.0),
        coord(H - 14.0),
    ));

    for (i, (label, points)) in series.iter().enumerate() {
        let verts: Vec<String> = points
            .iter()
            .map(|(e, v)| format!("{},{}", coord(x_of(*e)), coord(y_of(*v))))
            .collect();
        s.push_str(&format!(
            "<polyline class=\"series\" data-run=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            escape_html(label),
            verts.join(" "),
            color(i),
        ));
    }
    s.push_str("</svg>");
    s
}

/// Draws the DAG with one column per execution wave, rows in wave
/// order. Waves holding several steps get a dashed group box; steps
/// with resource tags are tinted and labeled with their tags.
pub fn dag_svg(flow: &ValidatedFlow) -> String {
    const NODE_W: f64 = 128.0;
    const NODE_H: f64 = 40.0;
    const COL_GAP: f64 = 56.0;
    const ROW_GAP: f64 = 24.0;
    const MARGIN: f64 = 20.0;

    let waves = flow.waves();
    let rows = waves.iter().map(|w| w.len()).max().unwrap_or(1);
    let width = MARGIN * 2.0
        + waves.len() as f64 * NODE_W
        + (waves.len().saturating_sub(1)) as f64 * COL_GAP;
    let height = MARGIN * 2.0 + rows as f64 * NODE_H + (rows.saturating_sub(1)) as f64 * ROW_GAP;

    // center of each node, keyed by step name
    let mut centers = std::collections::BTreeMap::new();
    for (col, wave) in waves.iter().enumerate() {
        for (row, name) in wave.iter().enumerate() {
            let x = MARGIN + col as f64 * (NODE_W + COL_GAP) + NODE_W / 2.0;
            let y = MARGIN + row as f64 * (NODE_H + ROW_GAP) + NODE_H / 2.0;
            centers.insert(name.clone(), (x, y));
        }
    }

    let mut s = String::new();
    s.push_str(&format!(
        "<svg viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\" role=\"img\">",
        coord(width),
        coord(height),
        coord(width),
        coord(height),
    ));
    s.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" \
         markerWidth=\"7\" markerHeight=\"7\" orient=\"auto-start-reverse\">\
         <path d=\"M 0 0 L 10 5 L 0 10 z\" fill=\"#666\"/></marker></defs>",
    );

    // dashed box around waves that run in parallel
    for (col, wave) in waves.iter().enumerate() {
        if wave.len() < 2 {
            continue;
        }
        let x = MARGIN + col as f64 * (NODE_W + COL_GAP) - 6.0;
        let y = MARGIN - 6.0;
        let h = wave.len() as f64 * NODE_H + (wave.len() - 1) as f64 * ROW_GAP + 12.0;
        s.push_str(&format!(
            "<rect class=\"wave parallel\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\" stroke-dasharray=\"4 3\" rx=\"8\"/>",
            coord(x),
            coord(y),
            coord(NODE_W + 12.0),
            coord(h),
        ));
    }

    // edges first so nodes draw over them
    for step in &flow.spec.steps {
        let (sx, sy) = centers[&step.name];
        for pred in &step.after {
            let (px, py) = centers[pred];
            s.push_str(&format!(
                "<line class=\"edge\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#666\" marker-end=\"url(#arrow)\"/>",
                coord(px + NODE_W / 2.0),
                coord(py),
                coord(sx - NODE_W / 2.0),
                coord(sy),
            ));
        }
    }

    for wave in &waves {
        for name in wave {
            let step = flow.spec.step(name).expect("wave names spec steps");
            let (cx, cy) = centers[name];
            let x = cx - NODE_W / 2.0;
            let y = cy - NODE_H / 2.0;
            let tagged = !step.resources.is_empty();
            let fill = if tagged { "#fde3e3" } else { "#e3edfd" };
            let class = if tagged { "node tagged" } else { "node" };
            s.push_str(&format!(
                "<rect class=\"{class}\" data-step=\"{}\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" rx=\"6\" fill=\"{fill}\" stroke=\"#456\"/>",
                escape_html(name),
                coord(x),
                coord(y),
                coord(NODE_W),
                coord(NODE_H),
            ));
            if tagged {
                s.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" font-weight=\"bold\">{}</text>",
                    coord(cx),
                    coord(cy - 2.0),
                    escape_html(name),
                ));
                s.push_str(&format!(
                    "<text class=\"resource\" x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\" fill=\"#922\">[{}]</text>",
                    coord(cx),
                    coord(cy + 12.0),
                    escape_html(&step.resources.join(" ")),
                ));
            } else {
                s.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
                    coord(cx),
                    coord(cy + 4.0),
                    escape_html(name),
                ));
            }
        }
    }
    s.push_str("</svg>");
    s
}
