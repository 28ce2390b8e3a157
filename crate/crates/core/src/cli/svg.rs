//! Hand-written SVG 1.1 output: mastery heatmaps and loss curves.

use std::fmt::Write as _;

const CELL: f64 = 18.0;
const LABEL_W: f64 = 64.0;
const MARK_H: f64 = 18.0;
const MARGIN: f64 = 8.0;

/// Maps a probability onto a white-to-dark-blue ramp (0 = white).
pub fn ramp(p: f64) -> String {
    let t = p.clamp(0.0, 1.0);
    let lerp = |from: f64, to: f64| (from + (to - from) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 29.0), lerp(255.0, 88.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(svg: &mut String, width: f64, height: f64) {
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);
}

/// One attempt in the annotation row above the heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attempt {
    pub skill: usize,
    pub correct: bool,
}

/// `grid[t][k]` is drawn at column `t`, row `k`, with the skills down the
/// side and the steps across, attempts marked on top.
pub fn mastery_heatmap(grid: &[Vec<f64>], skills: &[usize], attempts: &[Attempt]) -> String {
    let steps = grid.len();
    let width = LABEL_W + steps as f64 * CELL + 2.0 * MARGIN;
    let height = MARK_H + skills.len() as f64 * CELL + 2.0 * MARGIN + 14.0;
    let mut svg = String::new();
    open(&mut svg, width, height);

    let top = MARGIN;
    let _ = writeln!(svg, r#"<g id="attempts">"#);
    for (t, a) in attempts.iter().enumerate() {
        let x = LABEL_W + MARGIN + t as f64 * CELL;
        let fill = if a.correct { "#2ca02c" } else { "#d62728" };
        let _ = writeln!(
            svg,
            r#"<rect class="mark" x="{x}" y="{top}" width="{CELL}" height="{MARK_H}" fill="{fill}" stroke="white"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" fill="white">{}</text>"#,
            x + CELL / 2.0,
            top + MARK_H - 5.0,
            a.skill
        );
    }
    let _ = writeln!(svg, "</g>");

    let grid_top = top + MARK_H;
    let _ = writeln!(svg, r#"<g id="grid" data-rows="{steps}" data-cols="{}">"#, skills.len());
    for (k, skill) in skills.iter().enumerate() {
        let y = grid_top + k as f64 * CELL;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LABEL_W + MARGIN - 4.0,
            y + CELL - 5.0,
            escape(&format!("skill {skill}"))
        );
        for (t, row) in grid.iter().enumerate() {
            let p = row[k];
            let _ = writeln!(
                svg,
                r#"<rect class="cell" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>step {t}, skill {skill}: {p:.4}</title></rect>"#,
                LABEL_W + MARGIN + t as f64 * CELL,
                ramp(p)
            );
        }
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">step</text>"#,
        LABEL_W + MARGIN,
        height - MARGIN
    );
    svg.push_str("</svg>\n");
    svg
}

/// Train and validation loss per epoch as two polylines.
pub fn loss_curve(train: &[f64], val: &[f64]) -> String {
    let (w, h) = (480.0, 300.0);
    let (left, right, top, bottom) = (56.0, 16.0, 16.0, 36.0);
    let finite = train.iter().chain(val).copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let n = train.len().max(val.len()).max(2);
    let px = |i: usize| left + (w - left - right) * i as f64 / (n - 1) as f64;
    let py = |v: f64| top + (h - top - bottom) * (hi - v) / (hi - lo);

    let mut svg = String::new();
    open(&mut svg, w, h);
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        w - left - right,
        h - top - bottom
    );
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.4}</text>"#,
            left - 4.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        (left + w - right) / 2.0,
        h - 8.0
    );
    for (id, series, color) in [("train", train, "#1f77b4"), ("val", val, "#ff7f0e")] {
        let points: Vec<String> = series
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline id="{id}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
    }
    let _ = writeln!(svg, r##"<text x="{}" y="{}" fill="#1f77b4">train</text>"##, w - right - 70.0, top + 14.0);
    let _ = writeln!(svg, r##"<text x="{}" y="{}" fill="#ff7f0e">val</text>"##, w - right - 30.0, top + 14.0);
    svg.push_str("</svg>\n");
    svg
}
