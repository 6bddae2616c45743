//! Self-contained SVG charts from run CSVs: validation against step, and a KL-vs-validation
//! scatter with one shaded convex hull per series.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::csvlog::{read_rows, CsvError, MetricsRow};
use crate::train::METRICS_FILE;

pub const VALIDATION_SVG: &str = "validation.svg";
pub const SCATTER_SVG: &str = "kl_validation.svg";

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 420.0;
pub const MARGIN_LEFT: f64 = 64.0;
pub const MARGIN_RIGHT: f64 = 150.0;
pub const MARGIN_TOP: f64 = 24.0;
pub const MARGIN_BOTTOM: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: CsvError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One run's rows under a series name (the legend entry).
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub name: String,
    pub rows: Vec<MetricsRow>,
}

/// Linear map from data ranges onto the plotting area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl Frame {
    pub fn fit(points: &[(f64, f64)]) -> Self {
        let (x_min, x_max) = padded_range(points.iter().map(|p| p.0));
        let (y_min, y_max) = padded_range(points.iter().map(|p| p.1));
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        (
            MARGIN_LEFT + (x - self.x_min) / (self.x_max - self.x_min) * w,
            MARGIN_TOP + h - (y - self.y_min) / (self.y_max - self.y_min) * h,
        )
    }
}

/// Series names in order of first appearance, each with its color.
fn colors(series: &[RunSeries]) -> Vec<(String, &'static str)> {
    let mut out: Vec<(String, &'static str)> = Vec::new();
    for s in series {
        if !out.iter().any(|(n, _)| n == &s.name) {
            let c = PALETTE[out.len() % PALETTE.len()];
            out.push((s.name.clone(), c));
        }
    }
    out
}

fn color_of<'a>(colors: &'a [(String, &'static str)], name: &str) -> &'a str {
    colors.iter().find(|(n, _)| n == name).map_or(PALETTE[0], |(_, c)| c)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
}

fn axes(svg: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let (x0, y0) = (MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM);
    let (x1, y1) = (WIDTH - MARGIN_RIGHT, MARGIN_TOP);
    let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = frame.x_min + t * (frame.x_max - frame.x_min);
        let yv = frame.y_min + t * (frame.y_max - frame.y_min);
        let (px, _) = frame.map(xv, frame.y_min);
        let (_, py) = frame.map(frame.x_min, yv);
        let _ = writeln!(
            svg,
            r#"<line class="tick" x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 4.0,
            y0 + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r#"<line class="tick" x1="{:.2}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text class="axis-label" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text class="axis-label" transform="translate(14 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn legend(svg: &mut String, colors: &[(String, &'static str)]) {
    let x = WIDTH - MARGIN_RIGHT + 16.0;
    for (i, (name, color)) in colors.iter().enumerate() {
        let y = MARGIN_TOP + 8.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect class="legend-swatch" x="{x}" y="{:.2}" width="12" height="12" fill="{color}"/><text class="legend" x="{:.2}" y="{:.2}">{}</text>"#,
            y - 10.0,
            x + 18.0,
            y,
            escape(name)
        );
    }
}

fn marker(svg: &mut String, frame: &Frame, name: &str, color: &str, x: f64, y: f64) {
    let (cx, cy) = frame.map(x, y);
    let _ = writeln!(
        svg,
        r#"<circle class="marker" data-series="{}" cx="{cx:.4}" cy="{cy:.4}" r="3" fill="{color}"/>"#,
        escape(name)
    );
}

fn finite(x: f64, y: f64) -> bool {
    x.is_finite() && y.is_finite()
}

/// Validation score against step, one polyline per run.
pub fn validation_chart(series: &[RunSeries]) -> String {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.rows.iter().map(|r| (r.step as f64, r.validation)))
        .filter(|&(x, y)| finite(x, y))
        .collect();
    let frame = Frame::fit(&pts);
    let colors = colors(series);
    let mut svg = String::new();
    open(&mut svg, "validation vs step");
    axes(&mut svg, &frame, "step", "validation");
    for s in series {
        let color = color_of(&colors, &s.name);
        let run: Vec<(f64, f64)> = s
            .rows
            .iter()
            .map(|r| (r.step as f64, r.validation))
            .filter(|&(x, y)| finite(x, y))
            .collect();
        if run.len() > 1 {
            let points: Vec<String> = run
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = frame.map(x, y);
                    format!("{px:.4},{py:.4}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="line" data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                escape(&s.name),
                points.join(" ")
            );
        }
        for &(x, y) in &run {
            marker(&mut svg, &frame, &s.name, color, x, y);
        }
    }
    legend(&mut svg, &colors);
    svg.push_str("</svg>\n");
    svg
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull by monotone chain, counter-clockwise, without collinear points.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Every evaluated step as a (kl_from_init, validation) point; the convex hull of each
/// series is shaded.
pub fn kl_scatter(series: &[RunSeries]) -> String {
    let by_name = |name: &str| -> Vec<(f64, f64)> {
        series
            .iter()
            .filter(|s| s.name == name)
            .flat_map(|s| s.rows.iter().map(|r| (r.kl_from_init, r.validation)))
            .filter(|&(x, y)| finite(x, y))
            .collect()
    };
    let colors = colors(series);
    let all: Vec<(f64, f64)> = colors.iter().flat_map(|(n, _)| by_name(n)).collect();
    let frame = Frame::fit(&all);
    let mut svg = String::new();
    open(&mut svg, "kl from init vs validation");
    axes(&mut svg, &frame, "kl_from_init", "validation");
    for (name, color) in &colors {
        let pts = by_name(name);
        let hull = convex_hull(&pts);
        if hull.len() >= 3 {
            let points: Vec<String> = hull
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = frame.map(x, y);
                    format!("{px:.4},{py:.4}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon class="hull" data-series="{}" points="{}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-opacity="0.5"/>"#,
                escape(name),
                points.join(" ")
            );
        }
        for &(x, y) in &pts {
            marker(&mut svg, &frame, name, color, x, y);
        }
    }
    legend(&mut svg, &colors);
    svg.push_str("</svg>\n");
    svg
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Series name of a run: the comparison label for `<label>/seed-<n>/metrics.csv`, else the
/// algorithm column.
fn series_name(path: &Path, rows: &[MetricsRow]) -> String {
    let run_dir = path.parent();
    let is_seed_dir = run_dir
        .and_then(Path::file_name)
        .is_some_and(|n| n.to_string_lossy().starts_with("seed-"));
    if is_seed_dir {
        if let Some(label) = run_dir.and_then(Path::parent).and_then(Path::file_name) {
            return label.to_string_lossy().into_owned();
        }
    }
    rows.first().map_or_else(|| "run".to_string(), |r| r.algo.clone())
}

pub fn load_series(path: &Path) -> Result<RunSeries, PlotError> {
    let file = File::open(path)?;
    let csv = read_rows(BufReader::new(file)).map_err(|source| PlotError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(RunSeries {
        name: series_name(path, &csv.rows),
        rows: csv.rows,
    })
}

/// Reads every `metrics.csv` under `input` (or `input` itself when it is a file) and writes
/// both charts into `out`.
pub fn plot_dir(input: &Path, out: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let mut paths = Vec::new();
    if input.is_file() {
        paths.push(input.to_path_buf());
    } else {
        find_metrics(input, &mut paths)?;
    }
    let series = paths.iter().map(|p| load_series(p)).collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out)?;
    let written = vec![out.join(VALIDATION_SVG), out.join(SCATTER_SVG)];
    fs::write(&written[0], validation_chart(&series))?;
    fs::write(&written[1], kl_scatter(&series))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_square_with_interior_point() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5), (0.5, 0.0)];
        let hull = convex_hull(&pts);
        assert_eq!(hull, vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
    }

    #[test]
    fn degenerate_range_is_centered() {
        let f = Frame::fit(&[(2.0, 0.25)]);
        let (x, y) = f.map(2.0, 0.25);
        assert!((x - (MARGIN_LEFT + (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / 2.0)).abs() < 1e-9);
        assert!((y - (MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn escapes_names() {
        assert_eq!(escape("a<b>&\""), "a&lt;b&gt;&amp;&quot;");
    }
}
