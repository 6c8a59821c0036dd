//! Result files: CSV rows and standalone SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::ResultRow;
use crate::trainer::Method;

pub const CSV_HEADER: [&str; 9] = [
    "method", "phi_dim", "k_train", "seed", "split", "iteration", "metric", "value", "ci95",
];

pub fn csv_string(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::NoRows);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Invariant(format!("csv encoding: {e}"));
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.phi_dim.to_string(),
            r.k_train.to_string(),
            r.seed.to_string(),
            r.split.clone(),
            r.iteration.to_string(),
            r.metric.clone(),
            r.value.to_string(),
            r.ci95.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invariant(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes `rows` to `path`. With no rows nothing is written.
pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let text = csv_string(rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a results file written by [`emit_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Csv {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Csv {
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |field: &str, value: &str| Error::Csv {
            line,
            message: format!("invalid {field} {value:?}"),
        };
        let field = |i: usize| record.get(i).unwrap_or("");
        let int = |i: usize| field(i).parse::<u64>().map_err(|_| bad(CSV_HEADER[i], field(i)));
        let float = |i: usize| {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(CSV_HEADER[i], field(i)))
        };
        let method: Method = field(0).parse().map_err(|_| bad("method", field(0)))?;
        rows.push(ResultRow {
            method,
            phi_dim: int(1)? as usize,
            k_train: int(2)? as usize,
            seed: int(3)?,
            split: field(4).to_string(),
            iteration: int(5)?,
            metric: field(6).to_string(),
            value: float(7)?,
            ci95: float(8)?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

/// One plotted line.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A line chart ready to render.
#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn distinct<T: Ord>(rows: &[&ResultRow], key: impl Fn(&ResultRow) -> T) -> usize {
    rows.iter().map(|r| key(r)).collect::<std::collections::BTreeSet<_>>().len()
}

/// Chooses a chart for `rows`: test measurements against whichever of
/// adaptation size or context width varies, or else the validation curve
/// against iteration. Values are averaged over seeds.
pub fn chart_for(rows: &[ResultRow]) -> Result<Chart> {
    if rows.is_empty() {
        return Err(Error::NoRows);
    }
    let test: Vec<&ResultRow> = rows.iter().filter(|r| r.split == "test").collect();
    let (subset, x_label, x_of): (Vec<&ResultRow>, &str, fn(&ResultRow) -> f64) = if test.is_empty() {
        (rows.iter().collect(), "iteration", |r| r.iteration as f64)
    } else if distinct(&test, |r| r.k_train) > 1 {
        (test, "adaptation points k", |r| r.k_train as f64)
    } else if distinct(&test, |r| r.phi_dim) > 1 {
        (test, "context parameters", |r| r.phi_dim as f64)
    } else {
        (test, "adaptation points k", |r| r.k_train as f64)
    };
    let metrics = distinct(&subset, |r| r.metric.clone());
    let widths = if x_label == "context parameters" {
        1
    } else {
        distinct(&subset, |r| r.phi_dim)
    };
    let mut groups: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in &subset {
        let mut label = r.method.as_str().to_string();
        if widths > 1 {
            let _ = write!(label, " phi={}", r.phi_dim);
        }
        if metrics > 1 {
            let _ = write!(label, " {}", r.metric);
        }
        let x = x_of(r);
        let slot = groups.entry(label).or_default().entry(x.to_bits()).or_insert((0.0, 0));
        slot.0 += r.value;
        slot.1 += 1;
    }
    let series = groups
        .into_iter()
        .map(|(label, pts)| {
            let mut points: Vec<(f64, f64)> = pts
                .into_iter()
                .map(|(x, (sum, n))| (f64::from_bits(x), sum / n as f64))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect();
    let y_label = if metrics == 1 {
        subset[0].metric.clone()
    } else {
        "value".into()
    };
    let split = if x_label == "iteration" { "validation" } else { "test" };
    Ok(Chart {
        title: format!("{y_label} ({split})"),
        x_label: x_label.into(),
        y_label,
        series,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn tick_label(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e5) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

pub fn render_svg(chart: &Chart) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 55.0);
    let all = chart.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    y0 = y0.min(0.0);
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">
<rect width="{w}" height="{h}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>
<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gainsboro"/>"#,
            sx(xv),
            top + ph + 18.0,
            tick_label(xv),
            left - 6.0,
            sy(yv) + 4.0,
            tick_label(yv),
            sy(yv),
            left + pw,
            sy(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(&chart.x_label),
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&chart.y_label)
    );
    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>
<text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn emit_svg(rows: &[ResultRow], path: &Path) -> Result<()> {
    let svg = render_svg(&chart_for(rows)?);
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
