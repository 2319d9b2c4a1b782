//! Static SVG line plots of the CSV logs.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use clap::ValueEnum;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    /// Training log: losses against step.
    LossCurve,
    /// Sweep results: a metric against an axis, one series per tag.
    SweepCurve,
    /// Probe log: test accuracy against layer, one series per tag.
    ProbeCurve,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::LossCurve => "loss_curve",
            PlotKind::SweepCurve => "sweep_curve",
            PlotKind::ProbeCurve => "probe_curve",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
        let header = r
            .headers()
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str, kind: PlotKind) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("{} input lacks column {:?} (has {})", kind.name(), name, self.header.join(",")))
        })
    }
}

fn number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Averages `y` over rows sharing `(series, x)`.
fn grouped(entries: impl Iterator<Item = (String, f64, f64)>) -> Vec<Series> {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for (name, x, y) in entries {
        let slot = acc.entry(name).or_default().entry(x.to_bits() ^ (1 << 63)).or_insert((x, 0.0, 0));
        slot.1 += y;
        slot.2 += 1;
    }
    acc.into_iter()
        .map(|(name, pts)| {
            let mut points: Vec<(f64, f64)> = pts.into_values().map(|(x, s, n)| (x, s / n as f64)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect()
}

/// Builds the figure for `kind` from a CSV file. `x`/`y` choose columns for
/// sweep plots.
pub fn figure_from_csv(path: &Path, kind: PlotKind, x: Option<&str>, y: Option<&str>) -> Result<Figure> {
    let t = Table::read(path)?;
    let fig = match kind {
        PlotKind::LossCurve => {
            let step = t.col("step", kind)?;
            let mut series = Vec::new();
            for name in ["loss_total", "loss_mim", "loss_nce"] {
                let c = t.col(name, kind)?;
                let points: Vec<(f64, f64)> = t
                    .rows
                    .iter()
                    .filter_map(|r| Some((number(r.get(step)?)?, number(r.get(c)?)?)))
                    .collect();
                if !points.is_empty() {
                    series.push(Series { name: name.to_string(), points });
                }
            }
            Figure {
                title: "Training loss".into(),
                x_label: "step".into(),
                y_label: "loss".into(),
                series,
            }
        }
        PlotKind::ProbeCurve => {
            let (tag, layer, acc) = (t.col("tag", kind)?, t.col("layer", kind)?, t.col("test_accuracy", kind)?);
            let series = grouped(t.rows.iter().filter_map(|r| {
                Some((r.get(tag)?.clone(), number(r.get(layer)?)?, number(r.get(acc)?)?))
            }));
            Figure {
                title: "Linear probe by layer".into(),
                x_label: "encoder layer".into(),
                y_label: "test accuracy".into(),
                series,
            }
        }
        PlotKind::SweepCurve => {
            let (tag, status) = (t.col("tag", kind)?, t.col("status", kind)?);
            let seed = t.col("seed", kind)?;
            let x_name = match x {
                Some(x) => x.to_string(),
                None if status > seed + 1 => t.header[seed + 1].clone(),
                None => return Err(Error::Config("sweep results have no axis column; pass --x".into())),
            };
            let y_name = y.unwrap_or("finetune_best_top1").to_string();
            let (xc, yc) = (t.col(&x_name, kind)?, t.col(&y_name, kind)?);
            let series = grouped(t.rows.iter().filter(|r| r.get(status).map(String::as_str) == Some("ok")).filter_map(|r| {
                Some((r.get(tag)?.clone(), number(r.get(xc)?)?, number(r.get(yc)?)?))
            }));
            Figure {
                title: format!("{} by {}", y_name, x_name),
                x_label: x_name,
                y_label: y_name,
                series,
            }
        }
    };
    if fig.series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config(format!("{}: no plottable rows for {}", path.display(), kind.name())));
    }
    Ok(fig)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Renders a figure; identical input gives byte-identical output.
pub fn render_svg(fig: &Figure) -> String {
    let pts = || fig.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(pts().map(|p| p.0));
    let (y0, y1) = range(pts().map(|p| p.1));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(&fig.title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, tick_label(xv));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 8.0, py + 4.0, tick_label(yv));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&fig.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&fig.y_label)
    );
    for (i, series) in fig.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if path.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        if series.points.len() <= 64 {
            for &(x, y) in &series.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&series.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Reads `input`, renders `kind` and writes `<out_dir>/<kind>.svg`.
pub fn plot_file(input: &Path, kind: PlotKind, x: Option<&str>, y: Option<&str>, out_dir: &Path) -> Result<std::path::PathBuf> {
    let fig = figure_from_csv(input, kind, x, y)?;
    let path = out_dir.join(format!("{}.svg", kind.name()));
    std::fs::write(&path, render_svg(&fig)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
