//! Static SVG figures: image heatmaps, trajectory overlays and training
//! curves. Output is deterministic text.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Trajectory;
use crate::io_util::write_atomic;
use crate::trainer::{HistoryRow, Split};

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grayscale heatmap of a row-major `h × w` image. `range` defaults to the
/// image min/max.
pub fn heatmap_svg(
    img: &[f64],
    h: usize,
    w: usize,
    range: Option<(f64, f64)>,
    title: &str,
) -> Result<String> {
    if img.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape(
            "heatmap_svg",
            format!("{} values for {h}x{w}", img.len()),
        ));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        img.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            })
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = (512.0 / h.max(w) as f64).max(1.0);
    let top = 24.0;
    let mut s = header(w as f64 * cell, h as f64 * cell + top);
    let _ = writeln!(
        s,
        "<text x=\"4\" y=\"16\" font-size=\"13\" font-family=\"sans-serif\">{}</text>",
        escape(title)
    );
    let _ = writeln!(s, "<g shape-rendering=\"crispEdges\">");
    for y in 0..h {
        for x in 0..w {
            let v = ((img[y * w + x] - lo) / span).clamp(0.0, 1.0);
            let g = (v * 255.0).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#{g:02x}{g:02x}{g:02x}\"/>",
                x as f64 * cell,
                top + y as f64 * cell,
                cell,
                cell
            );
        }
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

/// Overlay of one or more trajectories in normalized k-space.
pub fn trajectory_svg(layers: &[(&str, &Trajectory)], title: &str) -> Result<String> {
    if layers.is_empty() {
        return Err(Error::invalid(
            "trajectory_svg needs at least one trajectory",
        ));
    }
    let size = 560.0;
    let pad = 30.0;
    let scale = size - 2.0 * pad;
    let map = |k: [f64; 2]| (pad + (k[0] + 0.5) * scale, pad + (0.5 - k[1]) * scale);
    let mut s = header(size, size + 20.0);
    let _ = writeln!(
        s,
        "<text x=\"4\" y=\"16\" font-size=\"13\" font-family=\"sans-serif\">{}</text>",
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{scale}\" height=\"{scale}\" fill=\"none\" stroke=\"#999\"/>"
    );
    for (li, (name, t)) in layers.iter().enumerate() {
        let color = PALETTE[li % PALETTE.len()];
        for sh in 0..t.shots() {
            let mut d = String::new();
            for (j, p) in t.shot(sh).iter().enumerate() {
                let (x, y) = map(*p);
                let _ = write!(d, "{}{x:.2},{y:.2} ", if j == 0 { "M" } else { "L" });
            }
            let _ = writeln!(
                s,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.8\" stroke-opacity=\"0.85\"/>",
                d.trim_end()
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" fill=\"{color}\">{}</text>",
            pad,
            size - 6.0 + 14.0 * li as f64 - 14.0 * (layers.len() - 1) as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Line chart of named series sharing an x axis.
pub fn line_chart_svg(
    series: &[(&str, Vec<(f64, f64)>)],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> Result<String> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::invalid("line chart has no finite points"));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (64.0, 16.0, 28.0, 44.0);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = header(w, h);
    let _ = writeln!(
        s,
        "<text x=\"{l}\" y=\"18\" font-size=\"13\" font-family=\"sans-serif\">{}</text>",
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
        w - l - r,
        h - t - b
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>",
            l - 4.0,
            py(fy) + 3.0,
            fmt_tick(fy)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
            px(fx),
            h - b + 14.0,
            fmt_tick(fx)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        (l + w - r) / 2.0,
        h - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" transform=\"rotate(-90 12 {:.1})\" text-anchor=\"middle\">{}</text>",
        (t + h - b) / 2.0,
        (t + h - b) / 2.0,
        escape(y_label)
    );
    for (i, (name, v)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (x, y) in v.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(
                d,
                "{}{:.2},{:.2} ",
                if d.is_empty() { "M" } else { "L" },
                px(*x),
                py(*y)
            );
        }
        if !d.is_empty() {
            let _ = writeln!(
                s,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                d.trim_end()
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"{color}\">{}</text>",
            w - r - 120.0,
            t + 14.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Train/val curves of one history column.
pub fn history_svg(rows: &[HistoryRow], column: &str) -> Result<String> {
    let get = |r: &HistoryRow| -> Option<f64> {
        Some(match column {
            "total" => r.loss.total,
            "l1" => r.loss.l1,
            "ssim_loss" => r.loss.ssim_loss,
            "pen_v" => r.loss.penalty_v,
            "pen_a" => r.loss.penalty_a,
            "psnr" => r.psnr,
            "ssim" => r.ssim,
            "frac_v_ok" => r.frac_v_ok,
            "frac_a_ok" => r.frac_a_ok,
            _ => return None,
        })
    };
    if rows.first().and_then(get).is_none() {
        return Err(Error::invalid(format!(
            "unknown or empty history column `{column}`"
        )));
    }
    let series: Vec<(&str, Vec<(f64, f64)>)> = [Split::Train, Split::Val]
        .iter()
        .map(|&sp| {
            (
                sp.as_str(),
                rows.iter()
                    .filter(|r| r.split == sp)
                    .filter_map(|r| get(r).map(|v| (r.epoch as f64, v)))
                    .collect(),
            )
        })
        .collect();
    line_chart_svg(&series, column, "epoch", column)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    write_atomic(path, svg.as_bytes())
}
