//! CSV and SVG reports of run records and aggregated curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Measure;
use crate::pipeline::{CurvePoint, RunRecord};

pub const METRICS_HEADER: [&str; 14] = [
    "run_id", "method", "seed", "alpha", "beta", "q", "gamma", "T", "accuracy", "dp", "delta_eo", "gap1", "gap2", "undefined_flags",
];

pub const CURVE_HEADER: [&str; 9] = ["method", "param", "mean_acc", "std_acc", "mean_dp", "std_dp", "mean_eo", "std_eo", "n"];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn measure(m: &Measure) -> String {
    opt(m.value())
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One row per run. Undefined metrics are empty and named in `undefined_flags`;
/// an aborted run has empty metrics and `failed` as its flag.
pub fn metrics_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        let mut row = vec![
            r.run_id.clone(),
            r.method.clone(),
            r.seed.to_string(),
            opt(r.alpha),
            opt(r.beta),
            opt(r.q),
            opt(r.gamma),
            opt(r.temperature),
        ];
        match &r.outcome {
            Ok(m) => row.extend([
                m.accuracy.to_string(),
                measure(&m.dp),
                measure(&m.delta_eo),
                measure(&m.confidence.gap_desired),
                measure(&m.confidence.gap_undesired),
                m.undefined_flags(),
            ]),
            Err(_) => row.extend(["", "", "", "", "", "failed"].map(String::from)),
        }
        w.write_record(&row)?;
    }
    into_string(w)
}

pub fn curve_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_HEADER)?;
    for p in points {
        w.write_record([
            p.method.clone(),
            p.param.to_string(),
            p.mean_acc.to_string(),
            p.std_acc.to_string(),
            opt(p.mean_dp),
            opt(p.std_dp),
            opt(p.mean_eo),
            opt(p.std_eo),
            p.n.to_string(),
        ])?;
    }
    into_string(w)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("no run records to report".into()));
    }
    write(path, &metrics_csv(records)?)
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Input("no curve points to report".into()));
    }
    write(path, &curve_csv(points)?)
}

/// Two side-by-side panels: accuracy vs DP and accuracy vs ΔEO, points joined
/// in grid order.
pub fn curve_svg(points: &[CurvePoint]) -> String {
    const W: f64 = 320.0;
    const H: f64 = 240.0;
    const PAD: f64 = 40.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}">"#,
        2.0 * W,
        H
    );
    let panels: [(&str, fn(&CurvePoint) -> Option<f64>); 2] = [("DP", |p| p.mean_dp), ("delta EO", |p| p.mean_eo)];
    for (k, (label, get)) in panels.iter().enumerate() {
        let xy: Vec<(f64, f64)> = points.iter().filter_map(|p| Some((get(p)?, p.mean_acc))).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let x0 = k as f64 * W;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            x0 + PAD,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12">{label}</text>"#, x0 + W / 2.0 - 10.0, H - 10.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12">accuracy</text>"#, x0 + 2.0, PAD - 10.0);
        if xy.is_empty() {
            continue;
        }
        let range = |vals: Vec<f64>| {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (xlo, xhi) = range(xy.iter().map(|p| p.0).collect());
        let (ylo, yhi) = range(xy.iter().map(|p| p.1).collect());
        let map = |(x, y): (f64, f64)| {
            (
                x0 + PAD + (x - xlo) / (xhi - xlo) * (W - 2.0 * PAD),
                H - PAD - (y - ylo) / (yhi - ylo) * (H - 2.0 * PAD),
            )
        };
        let path: Vec<String> = xy.iter().map(|&p| {
            let (x, y) = map(p);
            format!("{x:.2},{y:.2}")
        }).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#, path.join(" "));
        for &p in &xy {
            let (x, y) = map(p);
            let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="steelblue"/>"#);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_curve_svg(path: &Path, points: &[CurvePoint]) -> Result<()> {
    write(path, &curve_svg(points))
}
