//! Learning curves from one or more metrics files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{read_metrics, TrainRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(epoch, validation top-1)`.
    pub points: Vec<(usize, f64)>,
}

/// Metrics files named directly or found as `<dir>/metrics.csv` and
/// `<dir>/*/metrics.csv`, sorted within each directory.
pub fn collect_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let direct = p.join("metrics.csv");
            if direct.is_file() {
                out.push(direct);
            }
            let mut nested = Vec::new();
            for e in std::fs::read_dir(p).map_err(io_err(p))? {
                let sub = e.map_err(io_err(p))?.path().join("metrics.csv");
                if sub.is_file() {
                    nested.push(sub);
                }
            }
            nested.sort();
            out.extend(nested);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Usage("no metrics files found".into()));
    }
    Ok(out)
}

fn run_name(path: &Path) -> String {
    path.parent()
        .and_then(|d| d.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn series_of(name: &str, records: &[TrainRecord]) -> Vec<Series> {
    let mut out = Vec::new();
    for (net, pick) in [("vit", (|r: &TrainRecord| r.val_top1_vit) as fn(&TrainRecord) -> Option<f64>), ("agent", |r| r.val_top1_agent)] {
        let points: Vec<(usize, f64)> = records.iter().filter_map(|r| pick(r).map(|v| (r.epoch, v))).collect();
        if !points.is_empty() {
            out.push(Series {
                label: format!("{name}/{net}"),
                points,
            });
        }
    }
    out
}

pub fn load_series(files: &[PathBuf]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for f in files {
        out.extend(series_of(&run_name(f), &read_metrics(f)?));
    }
    Ok(out)
}

/// Wide CSV over the union of epochs; missing cells are empty.
pub fn merged_csv(series: &[Series]) -> String {
    let epochs: BTreeSet<usize> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let mut s = String::from("epoch");
    for x in series {
        s.push(',');
        s.push_str(&x.label.replace(',', "_"));
    }
    s.push('\n');
    for e in epochs {
        s.push_str(&e.to_string());
        for x in series {
            s.push(',');
            if let Some((_, v)) = x.points.iter().find(|p| p.0 == e) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Validation top-1 against epoch, one polyline per series.
pub fn svg(series: &[Series]) -> String {
    let (w, h, m) = (720.0, 440.0, 50.0);
    let max_e = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).max().unwrap_or(1).max(1) as f64;
    let lo = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).fold(f64::INFINITY, f64::min).min(100.0);
    let hi = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).fold(f64::NEG_INFINITY, f64::max).max(lo + 1.0);
    let x = |e: f64| m + (w - 2.0 * m) * e / max_e;
    let y = |v: f64| h - m - (h - 2.0 * m) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">val top-1 (%)</text>"#, h / 2.0, h / 2.0);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, m - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{m}" y="{}" text-anchor="middle">0</text>"#, h - m + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{max_e}</text>"#, w - m, h - m + 16.0);
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(e, v)| format!("{:.1},{:.1}", x(e as f64), y(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, w - m - 150.0, w - m - 130.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - m - 125.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `curves.csv` and `curves.svg` into `out` and returns the series.
pub fn curves(inputs: &[PathBuf], out: &Path) -> Result<Vec<Series>> {
    let series = load_series(&collect_files(inputs)?)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let csv = out.join("curves.csv");
    std::fs::write(&csv, merged_csv(&series)).map_err(io_err(&csv))?;
    let fig = out.join("curves.svg");
    std::fs::write(&fig, svg(&series)).map_err(io_err(&fig))?;
    Ok(series)
}
