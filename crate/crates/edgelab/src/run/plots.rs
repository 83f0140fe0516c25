//! Static vector plots of run summaries.
//!
//! Five standard panels are emitted from a set of run summaries:
//! internalization curves (target self-name rate over steps), capability
//! trajectories with each run's best-capability checkpoint starred, the
//! capability/internalization Pareto panel at those best checkpoints,
//! mean response length traces, and kept-fraction traces for runs whose
//! method logs one. The SVG is generated directly — no plotting
//! dependency — and a panel with nothing to show is skipped with a
//! warning rather than emitted empty.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::run::runner::RunSummary;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 52.0;

const PALETTE: [&str; 10] = [
    "#3366cc", "#dc3912", "#ff9900", "#109618", "#990099", "#0099c6", "#dd4477", "#66aa00",
    "#b82e2e", "#316395",
];

/// One named line (or scatter point set) on a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// A highlighted point drawn as a star.
    pub star: Option<(f64, f64)>,
}

/// A complete chart description, independent of its output path.
#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Scatter panels draw labeled points instead of polylines.
    pub scatter: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    let s = if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    };
    let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s
    }
}

fn data_range(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = lo.abs().max(1.0) * 0.1;
        return Some((lo - pad, hi + pad));
    }
    let pad = (hi - lo) * 0.06;
    Some((lo - pad, hi + pad))
}

fn star_points(cx: f64, cy: f64, r: f64) -> String {
    let mut pts = String::new();
    for i in 0..10 {
        let rad = if i % 2 == 0 { r } else { r * 0.42 };
        let ang = std::f64::consts::PI * (0.1 * i as f64 * 2.0) - std::f64::consts::FRAC_PI_2;
        let _ = write!(pts, "{:.2},{:.2} ", cx + rad * ang.cos(), cy + rad * ang.sin());
    }
    pts.trim_end().to_string()
}

/// Render a chart to an SVG document string. Pure.
pub fn render_chart(spec: &ChartSpec) -> String {
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let all_pts = || {
        spec.series
            .iter()
            .flat_map(|s| s.points.iter().chain(s.star.iter()))
            .copied()
    };
    let (x0, x1) = data_range(all_pts().map(|p| p.0)).unwrap_or((0.0, 1.0));
    let (y0, y1) = data_range(all_pts().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let sx = move |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let sy = move |y: f64| MARGIN_T + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Menlo, Consolas, monospace" font-size="12">"#
    );
    let _ = write!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{:.1}" y="24" font-size="15" font-weight="bold">{}</text>"#,
        MARGIN_L,
        esc(&spec.title)
    );

    // Gridlines and ticks.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let gx = MARGIN_L + f * plot_w;
        let gy = MARGIN_T + plot_h - f * plot_h;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = write!(
            svg,
            r##"<line x1="{gx:.1}" y1="{MARGIN_T}" x2="{gx:.1}" y2="{:.1}" stroke="#e5e5e5"/>"##,
            MARGIN_T + plot_h
        );
        let _ = write!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{gy:.1}" x2="{:.1}" y2="{gy:.1}" stroke="#e5e5e5"/>"##,
            MARGIN_L + plot_w
        );
        let _ = write!(
            svg,
            r#"<text x="{gx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_T + plot_h + 18.0,
            fmt_tick(xv)
        );
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_L - 8.0,
            gy + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = write!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#333"/>"##
    );
    let _ = write!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0,
        esc(&spec.x_label)
    );
    let _ = write!(
        svg,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        esc(&spec.y_label)
    );

    // Series bodies.
    for (i, s) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if spec.scatter {
            for &(x, y) in &s.points {
                let _ = write!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="{color}" fill-opacity="0.85"/>"#,
                    sx(x),
                    sy(y)
                );
                let _ = write!(
                    svg,
                    r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
                    sx(x) + 8.0,
                    sy(y) + 4.0,
                    esc(&s.label)
                );
            }
        } else if !s.points.is_empty() {
            let pts: Vec<String> =
                s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = write!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                pts.join(" ")
            );
            if s.points.len() == 1 {
                let (x, y) = s.points[0];
                let _ = write!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
        }
        if let Some((x, y)) = s.star {
            let _ = write!(
                svg,
                r##"<polygon points="{}" fill="{color}" stroke="#222" stroke-width="0.8"/>"##,
                star_points(sx(x), sy(y), 8.0)
            );
        }
        // Legend entry.
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_R + 14.0;
        let _ = write!(
            svg,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{color}"/>"#,
            ly - 10.0
        );
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#,
            lx + 18.0,
            esc(&s.label)
        );
    }
    svg.push_str("</svg>");
    svg
}

fn write_chart(spec: &ChartSpec, path: &Path) -> Result<()> {
    std::fs::write(path, render_chart(spec))?;
    Ok(())
}

fn eval_series(
    summaries: &[RunSummary],
    value: impl Fn(&crate::tasks::eval::EvalRecord) -> f64,
    star_at_best: bool,
) -> Vec<Series> {
    summaries
        .iter()
        .filter_map(|s| {
            if s.evals.is_empty() {
                return None;
            }
            let points: Vec<(f64, f64)> =
                s.evals.iter().map(|e| (e.step as f64, value(e))).collect();
            let star = if star_at_best {
                s.best_eval().map(|e| (e.step as f64, value(e)))
            } else {
                None
            };
            Some(Series { label: s.code.clone(), points, star })
        })
        .collect()
}

fn step_series(
    summaries: &[RunSummary],
    value: impl Fn(&crate::run::logs::StepRecord) -> Option<f64>,
) -> Vec<Series> {
    summaries
        .iter()
        .filter_map(|s| {
            let points: Vec<(f64, f64)> = s
                .steps
                .iter()
                .filter_map(|r| value(r).map(|v| (r.step as f64, v)))
                .collect();
            if points.is_empty() {
                return None;
            }
            Some(Series { label: s.code.clone(), points, star: None })
        })
        .collect()
}

/// Emit the standard panels for a set of runs into `out_dir`; returns
/// the paths written. Panels with no data are skipped with a warning on
/// stderr.
pub fn emit_plots(summaries: &[RunSummary], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, spec: ChartSpec| -> Result<()> {
        if spec.series.is_empty() {
            eprintln!("warning: plot {name} omitted — no run provides its series");
            return Ok(());
        }
        let path = out_dir.join(name);
        write_chart(&spec, &path)?;
        written.push(path);
        Ok(())
    };

    emit(
        "internalization.svg",
        ChartSpec {
            title: "Internalization: target self-name rate".to_string(),
            x_label: "step".to_string(),
            y_label: "persona self-name rate".to_string(),
            series: eval_series(summaries, |e| e.persona_selfname, false),
            scatter: false,
        },
    )?;
    emit(
        "capability.svg",
        ChartSpec {
            title: "Capability: held-out math accuracy (star = best checkpoint)".to_string(),
            x_label: "step".to_string(),
            y_label: "held-out math accuracy".to_string(),
            series: eval_series(summaries, |e| e.math_acc, true),
            scatter: false,
        },
    )?;
    emit(
        "pareto.svg",
        ChartSpec {
            title: "Capability vs internalization at each run's best checkpoint".to_string(),
            x_label: "held-out math accuracy".to_string(),
            y_label: "persona self-name rate".to_string(),
            series: summaries
                .iter()
                .filter_map(|s| {
                    s.best_eval().map(|e| Series {
                        label: s.code.clone(),
                        points: vec![(e.math_acc, e.persona_selfname)],
                        star: None,
                    })
                })
                .collect(),
            scatter: true,
        },
    )?;
    emit(
        "response_length.svg",
        ChartSpec {
            title: "Mean response length".to_string(),
            x_label: "step".to_string(),
            y_label: "tokens".to_string(),
            series: step_series(summaries, |r| r.diagnostics.mean_response_len),
            scatter: false,
        },
    )?;
    emit(
        "rho_kept.svg",
        ChartSpec {
            title: "Kept fraction of the hard mask".to_string(),
            x_label: "step".to_string(),
            y_label: "kept fraction".to_string(),
            series: step_series(summaries, |r| r.diagnostics.rho_kept),
            scatter: false,
        },
    )?;
    Ok(written)
}
