//! Sweep reporting: run records as CSV and JSON, and self-contained SVG
//! scatter plots relating scene complexity, bitwidth, and reconstruction
//! quality.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Column order of the CSV report; fixed so downstream tooling can rely
/// on it.
pub const REPORT_HEADER: &str = "scene,complexity,mode,target,penalty,fqr,psnr,bitops,storage_bytes";

/// One sweep cell's outcome. The CSV carries the header columns; the JSON
/// mirror additionally records where the telemetry lives and which
/// configuration produced the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scene: String,
    /// Scene complexity estimate (mean image gradient of the targets).
    pub complexity: f64,
    /// Optimization mode label ("mdl", "mgl", "ptq", "qat", ...).
    pub mode: String,
    /// Loss level the run was allowed to trade quality down to.
    pub target: f64,
    /// Total bit-penalty weight.
    pub penalty: f64,
    pub fqr: f64,
    pub psnr: f64,
    pub bitops: u128,
    pub storage_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telemetry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

/// Format with `sig` significant digits, trimming trailing zeros; plain
/// decimal in a readable exponent window, scientific outside it.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sig = sig.max(1);
    let e = x.abs().log10().floor() as i32;
    if (-4..6).contains(&e) {
        let decimals = (sig as i32 - 1 - e).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{:.*e}", sig - 1, x);
        match s.split_once('e') {
            Some((mantissa, exp)) if mantissa.contains('.') => format!(
                "{}e{exp}",
                mantissa.trim_end_matches('0').trim_end_matches('.')
            ),
            _ => s,
        }
    }
}

fn field_ok(label: &str, value: &str) -> Result<()> {
    if value.contains(',') || value.contains('\n') || value.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{label} {value:?} cannot be stored in a CSV field"
        )));
    }
    Ok(())
}

/// Render records as CSV with six significant digits on float columns.
pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in records {
        field_ok("scene label", &r.scene)?;
        field_ok("mode label", &r.mode)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.scene,
            format_sig(r.complexity, 6),
            r.mode,
            format_sig(r.target, 6),
            format_sig(r.penalty, 6),
            format_sig(r.fqr, 6),
            format_sig(r.psnr, 6),
            r.bitops,
            r.storage_bytes,
        ));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        Error::InvalidArgument(format!(
            "report line {line}: column {name} holds {raw:?}"
        ))
    })
}

/// Parse a CSV report back into records (the JSON-only fields stay empty).
pub fn records_from_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "report header must be {REPORT_HEADER:?}, found {:?}",
                other.map(|(_, h)| h).unwrap_or("")
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::InvalidArgument(format!(
                "report line {i}: expected 9 columns, found {}",
                cols.len()
            )));
        }
        records.push(RunRecord {
            scene: cols[0].to_string(),
            complexity: parse_field(i, "complexity", cols[1])?,
            mode: cols[2].to_string(),
            target: parse_field(i, "target", cols[3])?,
            penalty: parse_field(i, "penalty", cols[4])?,
            fqr: parse_field(i, "fqr", cols[5])?,
            psnr: parse_field(i, "psnr", cols[6])?,
            bitops: parse_field(i, "bitops", cols[7])?,
            storage_bytes: parse_field(i, "storage_bytes", cols[8])?,
            telemetry: None,
            config_fingerprint: None,
        });
    }
    Ok(records)
}

pub fn write_report_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    std::fs::write(path, records_to_csv(records)?)?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<RunRecord>> {
    records_from_csv(&std::fs::read_to_string(path)?)
}

/// JSON mirror of the report, including the CSV-suppressed fields.
pub fn write_report_json(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut json = serde_json::to_string_pretty(records)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

/// A labeled point on a scatter plot.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<ScatterPoint>,
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 600.0;
const PLOT_LEFT: f64 = 90.0;
const PLOT_RIGHT: f64 = 770.0;
const PLOT_TOP: f64 = 60.0;
const PLOT_BOTTOM: f64 = 530.0;
const TICKS: usize = 5;

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 0.0 {
        0.05 * span
    } else if lo != 0.0 {
        0.1 * lo.abs()
    } else {
        1.0
    };
    (lo - pad, hi + pad)
}

/// Render a deterministic, self-contained 800x600 scatter plot.
pub fn scatter_svg(plot: &ScatterPlot) -> String {
    let (x_lo, x_hi) = axis_range(plot.points.iter().map(|p| p.x));
    let (y_lo, y_hi) = axis_range(plot.points.iter().map(|p| p.y));
    let sx = |x: f64| PLOT_LEFT + (x - x_lo) / (x_hi - x_lo) * (PLOT_RIGHT - PLOT_LEFT);
    let sy = |y: f64| PLOT_BOTTOM - (y - y_lo) / (y_hi - y_lo) * (PLOT_BOTTOM - PLOT_TOP);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "  <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"32\" text-anchor=\"middle\" font-size=\"18\">{}</text>\n",
        SVG_W / 2.0,
        xml_escape(&plot.title)
    ));

    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = x_lo + f * (x_hi - x_lo);
        let yv = y_lo + f * (y_hi - y_lo);
        let (gx, gy) = (sx(xv), sy(yv));
        s.push_str(&format!(
            "  <line x1=\"{gx:.2}\" y1=\"{PLOT_TOP}\" x2=\"{gx:.2}\" y2=\"{PLOT_BOTTOM}\" \
             stroke=\"#dddddd\"/>\n"
        ));
        s.push_str(&format!(
            "  <line x1=\"{PLOT_LEFT}\" y1=\"{gy:.2}\" x2=\"{PLOT_RIGHT}\" y2=\"{gy:.2}\" \
             stroke=\"#dddddd\"/>\n"
        ));
        s.push_str(&format!(
            "  <text x=\"{gx:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            PLOT_BOTTOM + 20.0,
            format_sig(xv, 4)
        ));
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"12\">{}</text>\n",
            PLOT_LEFT - 8.0,
            gy + 4.0,
            format_sig(yv, 4)
        ));
    }
    s.push_str(&format!(
        "  <rect x=\"{PLOT_LEFT}\" y=\"{PLOT_TOP}\" width=\"{}\" height=\"{}\" \
         fill=\"none\" stroke=\"#333333\"/>\n",
        PLOT_RIGHT - PLOT_LEFT,
        PLOT_BOTTOM - PLOT_TOP
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        PLOT_BOTTOM + 45.0,
        xml_escape(&plot.x_label)
    ));
    s.push_str(&format!(
        "  <text x=\"24\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 24 {})\">{}</text>\n",
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        xml_escape(&plot.y_label)
    ));

    for p in &plot.points {
        let (cx, cy) = (sx(p.x), sy(p.y));
        s.push_str(&format!(
            "  <circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"5\" fill=\"#2a6f97\" \
             fill-opacity=\"0.85\"/>\n"
        ));
        if !p.label.is_empty() {
            s.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"#555555\">{}</text>\n",
                cx + 8.0,
                cy + 3.0,
                xml_escape(&p.label)
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scene complexity against the final average bitwidth.
pub fn complexity_vs_fqr_plot(records: &[RunRecord]) -> ScatterPlot {
    ScatterPlot {
        title: "Scene complexity vs. average bitwidth".into(),
        x_label: "scene complexity (mean image gradient)".into(),
        y_label: "average bitwidth (FQR)".into(),
        points: records
            .iter()
            .map(|r| ScatterPoint {
                x: r.complexity,
                y: r.fqr,
                label: r.scene.clone(),
            })
            .collect(),
    }
}

/// Reconstruction quality against the final average bitwidth.
pub fn psnr_vs_fqr_plot(records: &[RunRecord]) -> ScatterPlot {
    ScatterPlot {
        title: "Quality vs. average bitwidth".into(),
        x_label: "average bitwidth (FQR)".into(),
        y_label: "PSNR (dB)".into(),
        points: records
            .iter()
            .map(|r| ScatterPoint {
                x: r.fqr,
                y: r.psnr,
                label: r.scene.clone(),
            })
            .collect(),
    }
}

/// Write the CSV, JSON, and both scatter plots into `dir`.
pub fn write_report_bundle(dir: &Path, records: &[RunRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_report_csv(&dir.join("report.csv"), records)?;
    write_report_json(&dir.join("report.json"), records)?;
    std::fs::write(
        dir.join("complexity_vs_fqr.svg"),
        scatter_svg(&complexity_vs_fqr_plot(records)),
    )?;
    std::fs::write(
        dir.join("psnr_vs_fqr.svg"),
        scatter_svg(&psnr_vs_fqr_plot(records)),
    )?;
    Ok(())
}
