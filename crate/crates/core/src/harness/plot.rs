use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Method, TradeoffRecord};
use crate::error::{Error, Result};
use crate::io::fmt_f64;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
/// Fairness losses are clamped here before taking log10.
const LOSS_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    /// One CSV per method, in method order.
    pub series: Vec<PathBuf>,
    pub svg: PathBuf,
}

fn color(m: Method) -> &'static str {
    match m {
        Method::Vanilla => "#444444",
        Method::FairSinkhorn => "#d62728",
        Method::Penalized => "#1f77b4",
        Method::CostlearnMahalanobis => "#2ca02c",
        Method::CostlearnMlp => "#9467bd",
    }
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-12 * hi.abs().max(1.0) {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Writes `plots/<method>.csv` series and `plots/tradeoff.svg`, a scatter of
/// cost gap against log-scaled fairness loss with one polyline per method in
/// grid order. Failed points (NaN metrics) are left out.
pub fn emit_plot_data(records: &[TradeoffRecord], dir: &Path) -> Result<PlotFiles> {
    let mut by_method: BTreeMap<Method, Vec<&TradeoffRecord>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.transport_cost_gap.is_finite() && r.fairness_loss.is_finite())
    {
        by_method.entry(r.method).or_default().push(r);
    }
    if by_method.is_empty() {
        return Err(Error::invalid("no plottable records"));
    }
    for series in by_method.values_mut() {
        series.sort_by(|a, b| a.grid_value.total_cmp(&b.grid_value));
    }
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;

    let mut files = Vec::new();
    for (method, series) in &by_method {
        let path = plots.join(format!("{method}.csv"));
        let mut text = String::from("grid_value,transport_cost_gap,fairness_loss\n");
        for r in series {
            let _ = writeln!(
                text,
                "{},{},{}",
                fmt_f64(r.grid_value),
                fmt_f64(r.transport_cost_gap),
                fmt_f64(r.fairness_loss)
            );
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }

    let all = by_method.values().flatten();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for r in all {
        let y = r.fairness_loss.max(LOSS_FLOOR).log10();
        x_lo = x_lo.min(r.transport_cost_gap);
        x_hi = x_hi.max(r.transport_cost_gap);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let (x_lo, x_hi) = span(x_lo, x_hi);
    let (y_lo, y_hi) = span(y_lo.floor(), y_hi.ceil());
    let sx = |v: f64| MARGIN + (v - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let sy = |v: f64| {
        HEIGHT
            - MARGIN
            - (v.max(LOSS_FLOOR).log10() - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN)
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} V{bottom} H{right}" fill="none" stroke="black"/>"#
    );
    let mut decade = y_lo;
    while decade <= y_hi {
        let y = HEIGHT - MARGIN - (decade - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{decade}</text>"#,
            left - 6.0,
            y + 4.0
        );
        decade += 1.0;
    }
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="{:.2}">{}</text><text x="{right}" y="{:.2}" text-anchor="end">{}</text>"#,
        bottom + 18.0,
        fmt_f64(x_lo),
        bottom + 18.0,
        fmt_f64(x_hi)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">transport cost gap</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(15 {:.2}) rotate(-90)" text-anchor="middle">fairness loss</text>"#,
        HEIGHT / 2.0
    );
    for (k, (method, series)) in by_method.iter().enumerate() {
        let c = color(*method);
        let pts: Vec<String> = series
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.transport_cost_gap), sy(r.fairness_loss)))
            .collect();
        let _ = writeln!(svg, r#"<g class="series" data-method="{method}">"#);
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{c}"/>"#,
            pts.join(" ")
        );
        for r in series {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
                sx(r.transport_cost_gap),
                sy(r.fairness_loss)
            );
        }
        let ly = top + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{c}" text-anchor="end">{method}</text></g>"#,
            right
        );
    }
    svg.push_str("</svg>\n");
    let svg_path = plots.join("tradeoff.svg");
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    Ok(PlotFiles {
        series: files,
        svg: svg_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::PointStatus;

    fn rec(method: Method, point: usize, gap: f64, loss: f64) -> TradeoffRecord {
        TradeoffRecord {
            point,
            method,
            grid_value: 1.0 + point as f64,
            transport_cost_gap: gap,
            fairness_loss: loss,
            iterations: 1,
            status: PointStatus::Converged,
            wall_time_seconds: 0.0,
            seed: 0,
        }
    }

    fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
        svg.lines()
            .filter_map(|l| l.split("points=\"").nth(1))
            .map(|rest| {
                rest.split('"')
                    .next()
                    .unwrap()
                    .split(' ')
                    .map(|p| {
                        let (a, b) = p.split_once(',').unwrap();
                        (a.parse().unwrap(), b.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn one_record_gives_one_point() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plot_data(&[rec(Method::Penalized, 0, 0.5, 1e-3)], dir.path()).unwrap();
        assert_eq!(files.series.len(), 1);
        let csv = std::fs::read_to_string(&files.series[0]).unwrap();
        assert_eq!(csv.lines().count(), 2);
        let svg = std::fs::read_to_string(&files.svg).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(polylines(&svg)[0].len(), 1);
    }

    #[test]
    fn one_series_per_method() {
        let dir = tempfile::tempdir().unwrap();
        let recs = [
            rec(Method::Vanilla, 0, 0.0, 0.3),
            rec(Method::Vanilla, 1, 0.1, 0.2),
            rec(Method::Penalized, 0, 0.2, 0.01),
        ];
        let files = emit_plot_data(&recs, dir.path()).unwrap();
        assert_eq!(files.series.len(), 2);
        assert!(files.series[0].ends_with("plots/vanilla.csv"));
        let svg = std::fs::read_to_string(&files.svg).unwrap();
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
    }

    #[test]
    fn monotone_sweep_gives_monotone_polyline() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..10)
            .map(|k| {
                rec(
                    Method::Penalized,
                    k,
                    0.1 * k as f64,
                    10f64.powi(-(k as i32)),
                )
            })
            .collect();
        let files = emit_plot_data(&recs, dir.path()).unwrap();
        let line = &polylines(&std::fs::read_to_string(&files.svg).unwrap())[0];
        // SVG y grows downwards: smaller loss is lower on the plot.
        assert!(line
            .windows(2)
            .all(|w| w[1].1 >= w[0].1 && w[1].0 >= w[0].0));
    }

    #[test]
    fn empty_and_failed_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plot_data(&[], dir.path()).is_err());
        assert!(
            emit_plot_data(&[rec(Method::Vanilla, 0, f64::NAN, f64::NAN)], dir.path()).is_err()
        );
    }
}
