//! Score-over-time SVG plots with labeled windows shaded.
//!
//! The plotted series is also written verbatim into a `data-values`
//! attribute so a plot can be checked against the trace it came from.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::PathBuf;

use crate::datagen::Split;
use crate::detect::{ScoreMethod, ScoreTrace};
use crate::error::{Error, Result};
use crate::experiment::{load_dataset, load_trace, RunPaths};

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Renders one trace. `windows` and the x axis are raw time indices; a
/// step is drawn at the last raw point it covers.
pub fn render_trace(trace: &ScoreTrace, step: usize, windows: &[Range<usize>], title: &str) -> String {
    let xs: Vec<f64> = trace
        .steps
        .iter()
        .map(|&s| ((s + 1) * step) as f64 - 1.0)
        .collect();
    let ys: Vec<f64> = trace.scores.iter().map(|&s| s as f64).collect();

    let mut x_lo = xs.first().copied().unwrap_or(0.0);
    let mut x_hi = xs.last().copied().unwrap_or(1.0);
    for w in windows {
        x_lo = x_lo.min(w.start as f64);
        x_hi = x_hi.max(w.end as f64);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    let y_hi = ys.iter().copied().fold(1.0, f64::max);
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - y / y_hi * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );
    for w in windows {
        let (a, b) = (px(w.start as f64), px(w.end as f64));
        let _ = writeln!(
            svg,
            r##"<rect class="label-window" x="{a:.2}" y="{MARGIN}" width="{:.2}" height="{:.2}" fill="#f4a582" fill-opacity="0.4"/>"##,
            (b - a).max(0.5),
            HEIGHT - 2.0 * MARGIN
        );
    }
    // Axes.
    let _ = writeln!(
        svg,
        r#"<path class="axes" d="M{MARGIN} {MARGIN} V{y0} H{x1}" stroke="black" fill="none"/>"#,
        y0 = HEIGHT - MARGIN,
        x1 = WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y_hi}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">0</text>"#,
        MARGIN - 4.0,
        HEIGHT - MARGIN
    );
    if !ys.is_empty() {
        let points: Vec<String> = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let values: Vec<String> = trace.scores.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            svg,
            r##"<polyline class="score" points="{}" data-values="{}" stroke="#2166ac" fill="none" stroke-width="1"/>"##,
            points.join(" "),
            values.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scores recovered from a rendered plot's `data-values` attribute; empty
/// for a plot of an empty trace.
pub fn plotted_values(svg: &str) -> Result<Vec<f64>> {
    let Some(at) = svg.find("data-values=\"") else {
        return Ok(Vec::new());
    };
    let rest = &svg[at + "data-values=\"".len()..];
    let end = rest
        .find('"')
        .ok_or_else(|| Error::Format("unterminated data-values attribute".into()))?;
    rest[..end]
        .split_whitespace()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| Error::Format(format!("bad plotted value {v:?}: {e}")))
        })
        .collect()
}

/// Number of shaded label windows in a rendered plot.
pub fn shaded_windows(svg: &str) -> usize {
    svg.matches(r#"class="label-window""#).count()
}

/// Writes `plots/<method>.svg` for every score trace of a run.
pub fn emit_plots(paths: &RunPaths, step: usize) -> Result<Vec<PathBuf>> {
    let (_, labels, _) = load_dataset(paths)?;
    let windows: Vec<Range<usize>> = labels
        .iter()
        .filter(|l| l.split == Split::Test)
        .map(|l| l.start..l.end)
        .collect();
    fs::create_dir_all(paths.plots_dir())?;
    let mut out = Vec::new();
    for method in ScoreMethod::ALL {
        let trace = load_trace(paths, method)?;
        let svg = render_trace(
            &trace,
            step,
            &windows,
            &format!("{method} (θ = {:.4})", trace.theta),
        );
        let path = paths.plots_dir().join(format!("{method}.svg"));
        fs::write(&path, svg)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn trace(scores: Vec<usize>) -> ScoreTrace {
        let t0 = NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let n = scores.len();
        ScoreTrace {
            method: ScoreMethod::ContextH,
            theta: 0.5,
            steps: (10..10 + n).collect(),
            timestamps: (0..n).map(|k| t0 + chrono::Duration::minutes(k as i64)).collect(),
            detections: scores.iter().map(|&s| s > 0).collect(),
            scores,
        }
    }

    #[test]
    fn empty_trace_draws_axes_only() {
        let svg = render_trace(&trace(vec![]), 5, &[], "empty");
        assert!(svg.contains(r#"class="axes""#));
        assert!(!svg.contains("polyline"));
        assert!(plotted_values(&svg).unwrap().is_empty());
    }

    #[test]
    fn one_shaded_region_per_window() {
        let svg = render_trace(&trace(vec![0, 3, 0, 7]), 5, &[50..55, 60..62, 64..70], "t");
        assert_eq!(shaded_windows(&svg), 3);
    }

    #[test]
    fn plotted_values_match_trace() {
        let t = trace(vec![0, 3, 0, 7, 12]);
        let svg = render_trace(&t, 5, &[], "a < b & c");
        let want: Vec<f64> = t.scores.iter().map(|&s| s as f64).collect();
        assert_eq!(plotted_values(&svg).unwrap(), want);
        assert!(svg.contains("a &lt; b &amp; c"));
    }
}
