//! Evaluation exports and the ablation summary built from metrics logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use protoseg_core::train::{EvalMode, EvalReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io;
use crate::metrics::Record;

/// An evaluation report with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalExport {
    pub report: EvalReport,
    pub config: RunConfig,
}

pub fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Visual => "visual",
        EvalMode::ZeroShot => "zero_shot",
    }
}

/// Writes `<stem>.json` and the plot-ready `<stem>.csv` (one row per class).
pub fn write_eval(dir: &Path, stem: &str, export: &EvalExport) -> Result<()> {
    io::write_json(&dir.join(format!("{stem}.json")), export)?;
    let path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::format(&path, e.to_string()))?;
    let fail = |e: csv::Error| CliError::format(&path, e.to_string());
    w.write_record(["class", "name", "iou", "tp", "fp", "fn"]).map_err(fail)?;
    for c in &export.report.per_class {
        w.write_record([
            c.class.to_string(),
            c.name.clone().unwrap_or_default(),
            c.iou.to_string(),
            c.counts.tp.to_string(),
            c.counts.fp.to_string(),
            c.counts.fn_.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

/// What one metrics log contributes to the summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub qgpa: bool,
    pub sr: bool,
    pub mean_iou: Option<f64>,
    /// (iteration, total loss) per training step.
    pub curve: Vec<(usize, f64)>,
}

pub fn summarize(label: &str, records: &[Record]) -> std::result::Result<RunSummary, String> {
    let Some(Record::Run { flags, .. }) = records.first() else {
        return Err("log does not start with a run record".into());
    };
    let mean_iou = records.iter().rev().find_map(|r| match r {
        Record::Eval { mode, mean_iou, .. } if mode == "visual" => Some(*mean_iou),
        _ => None,
    });
    let curve = records
        .iter()
        .filter_map(|r| match r {
            Record::Step { iteration, loss_total, .. } => Some((*iteration, *loss_total)),
            _ => None,
        })
        .collect();
    Ok(RunSummary { label: label.to_string(), qgpa: flags.qgpa, sr: flags.sr, mean_iou, curve })
}

/// Mean IoU per {qgpa, sr} cell over the runs that reported one.
pub fn grid(runs: &[RunSummary]) -> BTreeMap<(bool, bool), (usize, f64)> {
    let mut cells: BTreeMap<(bool, bool), (usize, f64)> = BTreeMap::new();
    for r in runs {
        if let Some(m) = r.mean_iou {
            let e = cells.entry((r.qgpa, r.sr)).or_default();
            e.0 += 1;
            e.1 += m;
        }
    }
    for v in cells.values_mut() {
        v.1 /= v.0 as f64;
    }
    cells
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Markdown table with one row per QGPA setting and one column per SR
/// setting present in `runs`, in IoU points.
pub fn grid_markdown(runs: &[RunSummary]) -> String {
    let cells = grid(runs);
    let mut qs: Vec<bool> = cells.keys().map(|k| k.0).collect();
    let mut ss: Vec<bool> = cells.keys().map(|k| k.1).collect();
    qs.dedup();
    ss.sort();
    ss.dedup();
    let mut out = String::from("| QGPA |");
    for s in &ss {
        let _ = write!(out, " SR {} |", on_off(*s));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(ss.len()));
    out.push('\n');
    for q in &qs {
        let _ = write!(out, "| {} |", on_off(*q));
        for s in &ss {
            match cells.get(&(*q, *s)) {
                Some((n, m)) => {
                    let _ = write!(out, " {:.2} (n={n}) |", 100.0 * m);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn grid_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("qgpa,sr,runs,mean_iou\n");
    for ((q, s), (n, m)) in grid(runs) {
        let _ = writeln!(out, "{q},{s},{n},{m}");
    }
    out
}

/// Trailing moving average with a window of about 2% of the run.
fn smooth(curve: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let w = (curve.len() / 50).max(1);
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(curve.len());
    for (i, &(it, v)) in curve.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= curve[i - w].1;
        }
        out.push((it, sum / (i + 1).min(w) as f64));
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Self-contained SVG of the smoothed total loss of every run.
pub fn learning_curve_svg(runs: &[RunSummary]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let curves: Vec<Vec<(usize, f64)>> = runs.iter().map(|r| smooth(&r.curve)).collect();
    let pts = curves.iter().flatten();
    let x_max = pts.clone().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
    let y_max = pts.clone().map(|p| p.1).fold(0.0f64, f64::max).max(1e-9);
    let sx = |x: f64| pad + (w - 2.0 * pad) * x / x_max;
    let sy = |y: f64| h - pad - (h - 2.0 * pad) * y / y_max;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(out, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">total loss</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{x_max}</text>"#, w - pad, h - pad + 15.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y_max:.3}</text>"#, pad - 4.0, pad + 4.0);
    for (i, (run, c)) in runs.iter().zip(&curves).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !c.is_empty() {
            let mut d = String::new();
            for (j, &(x, y)) in c.iter().enumerate() {
                let _ = write!(d, "{}{:.2} {:.2}", if j == 0 { "M" } else { " L" }, sx(x as f64), sy(y));
            }
            let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            w - pad,
            xml_escape(&run.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(q: bool, s: bool, m: f64) -> RunSummary {
        RunSummary { label: format!("q{q}s{s}"), qgpa: q, sr: s, mean_iou: Some(m), curve: vec![(0, 2.0), (1, 1.0)] }
    }

    #[test]
    fn single_log_gives_single_row() {
        let md = grid_markdown(&[run(true, true, 0.5)]);
        let rows: Vec<&str> = md.lines().collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2], "| on | 50.00 (n=1) |");
    }

    #[test]
    fn four_logs_give_two_by_two() {
        let runs = [run(false, false, 0.1), run(false, true, 0.2), run(true, false, 0.3), run(true, true, 0.4)];
        let md = grid_markdown(&runs);
        assert_eq!(md.lines().count(), 4);
        assert!(md.starts_with("| QGPA | SR off | SR on |"));
        assert!(md.contains("| off | 10.00 (n=1) | 20.00 (n=1) |"));
        assert!(md.contains("| on | 30.00 (n=1) | 40.00 (n=1) |"));
        assert_eq!(grid_csv(&runs).lines().count(), 5);
    }

    #[test]
    fn repeated_runs_are_averaged() {
        let cells = grid(&[run(true, false, 0.2), run(true, false, 0.4)]);
        assert_eq!(cells[&(true, false)], (2, 0.30000000000000004));
    }

    #[test]
    fn svg_is_deterministic_and_closed() {
        let runs = [run(true, true, 0.4), run(false, false, 0.1)];
        let a = learning_curve_svg(&runs);
        assert_eq!(a, learning_curve_svg(&runs));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<path").count(), 3);
    }

    #[test]
    fn smoothing_keeps_constant_curves() {
        let c: Vec<(usize, f64)> = (0..200).map(|i| (i, 3.0)).collect();
        assert!(smooth(&c).iter().all(|p| (p.1 - 3.0).abs() < 1e-12));
    }
}
