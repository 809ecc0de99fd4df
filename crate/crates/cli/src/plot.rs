//! Minimal SVG line charts of training metrics and PR curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_err, HarnessError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

/// Renders `series` as polylines on shared axes; non-finite points are skipped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for (v, anchor, x, y) in [
        (x0, "start", MARGIN, HEIGHT - MARGIN + 15.0),
        (x1, "end", WIDTH - MARGIN, HEIGHT - MARGIN + 15.0),
    ] {
        let _ = writeln!(svg, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#, tick(v));
    }
    for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 4.0, y + 4.0, tick(v));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parsed numeric CSV: header plus rows; unparsable cells become NaN.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r.get(i).copied().unwrap_or(f64::NAN)).collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| HarnessError::Data {
            path: path.to_path_buf(),
            message: "empty table".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    Ok(Table { header, rows })
}

fn series(table: &Table, x: &str, ys: &[&str]) -> Vec<Series> {
    let xs = table.column(x).unwrap_or_default();
    ys.iter()
        .filter_map(|&y| {
            let col = table.column(y)?;
            Some(Series {
                name: y.to_string(),
                points: xs.iter().copied().zip(col).collect(),
            })
        })
        .collect()
}

/// Renders `plots/loss.svg`, `plots/thresholds.svg` and one PR chart per
/// category from a run directory; returns the files written.
pub fn plot_run(run: &Path) -> Result<Vec<PathBuf>> {
    let out = run.join("plots");
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut written = Vec::new();
    let mut emit = |name: String, svg: String| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, svg).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };

    let metrics = read_table(&run.join(crate::run::METRICS))?;
    emit(
        "loss.svg".into(),
        line_chart("Training loss", "step", "loss", &series(&metrics, "step", &["loss", "l_s", "l_u", "l_scale"])),
    )?;
    let tau: Vec<&str> = metrics.header.iter().filter(|h| h.starts_with("tau2_")).map(String::as_str).collect();
    if !tau.is_empty() {
        emit(
            "thresholds.svg".into(),
            line_chart("Foreground thresholds", "step", "threshold", &series(&metrics, "step", &tau)),
        )?;
    }

    let pr_dir = run.join("pr_curves");
    if pr_dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&pr_dir)
            .map_err(io_err(&pr_dir))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        let mut by_category: Vec<(String, Vec<Series>)> = Vec::new();
        for file in files {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let (category, iou) = stem.rsplit_once('_').unwrap_or((&stem, ""));
            if !matches!(iou, "50" | "75") {
                continue;
            }
            let table = read_table(&file)?;
            let s = Series {
                name: format!("IoU 0.{iou}"),
                points: table
                    .column("recall")
                    .unwrap_or_default()
                    .into_iter()
                    .zip(table.column("precision").unwrap_or_default())
                    .collect(),
            };
            match by_category.iter_mut().find(|(c, _)| c == category) {
                Some((_, v)) => v.push(s),
                None => by_category.push((category.to_string(), vec![s])),
            }
        }
        for (category, s) in by_category {
            emit(format!("pr_{category}.svg"), line_chart(&format!("PR: {category}"), "recall", "precision", &s))?;
        }
    }
    Ok(written)
}
