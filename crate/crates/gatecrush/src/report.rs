//! History/metrics CSV files and the run report (CSV plus SVG plots).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gatecrush_core::pruner::EpochRecord;

use crate::error::{format_err, io_err, Result};

/// One history line; empty cells stand for "not applicable".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub acc_loss: f64,
    pub eff_value: f64,
    pub predicted_latency_ms_or_flops: Option<f64>,
    /// Per-layer counts joined with `;`.
    pub encoding: String,
    pub eval_accuracy: Option<f64>,
}

impl From<&EpochRecord> for HistoryRow {
    fn from(r: &EpochRecord) -> Self {
        HistoryRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            acc_loss: r.acc_loss,
            eff_value: r.eff_value,
            predicted_latency_ms_or_flops: r.efficiency,
            encoding: join_encoding(&r.encoding),
            eval_accuracy: r.eval_accuracy,
        }
    }
}

pub fn join_encoding(counts: &[usize]) -> String {
    counts.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn split_encoding(s: &str) -> Option<Vec<usize>> {
    s.split([';', ',']).map(|t| t.trim().parse().ok()).collect()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    if history.is_empty() {
        w.write_record([
            "epoch",
            "train_loss",
            "acc_loss",
            "eff_value",
            "predicted_latency_ms_or_flops",
            "encoding",
            "eval_accuracy",
        ])
        .map_err(|e| format_err(path, e.to_string()))?;
    }
    for r in history {
        w.serialize(HistoryRow::from(r)).map_err(|e| format_err(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| format_err(path, e.to_string())))
        .collect()
}

/// `key,value` metrics file.
pub fn write_metrics(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    w.write_record(["key", "value"]).map_err(|e| format_err(path, e.to_string()))?;
    for (k, v) in rows {
        w.write_record([*k, v.as_str()]).map_err(|e| format_err(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
            Ok((rec[0].to_string(), rec[1].to_string()))
        })
        .collect()
}

pub fn metric(rows: &[(String, String)], key: &str) -> Option<String> {
    rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str, (y0, y1): (f64, f64)) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{ylabel}</text>\n\
         <path d=\"M{PAD} {PAD} V{} H{}\" fill=\"none\" stroke=\"black\"/>\n",
        W / 2.0,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
        H - PAD,
        W - PAD,
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.4}</text>", PAD - 4.0, PAD + 4.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.4}</text>", PAD - 4.0, H - PAD);
    s
}

/// Line plot of `(label, points)` series.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = svg_open(title, xlabel, ylabel, (y0, y1));
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", path.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>",
            W - PAD - 120.0,
            PAD + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<f64>)]) -> String {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(1);
    let y1 = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(1e-12, f64::max);
    let mut s = svg_open(title, xlabel, ylabel, (0.0, y1));
    let group = (W - 2.0 * PAD) / n as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (j, (label, vals)) in series.iter().enumerate() {
        let color = COLORS[j % COLORS.len()];
        for (i, &v) in vals.iter().enumerate() {
            let h = v / y1 * (H - 2.0 * PAD);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>",
                PAD + group * i as f64 + group * 0.1 + bar * j as f64,
                H - PAD - h,
                bar,
                h
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>",
            W - PAD - 120.0,
            PAD + 16.0 * j as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

pub const STAGES: [&str; 3] = ["baseline", "prune", "finetune"];

/// Summarizes the artifacts found in `dir` and returns the written files.
pub fn write_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))?;
        written.push(p);
        Ok(())
    };

    let mut summary = String::from("stage,accuracy,flops,encoding\n");
    let mut encodings: Vec<(String, Vec<f64>)> = Vec::new();
    for stage in ["baseline", "export", "finetune"] {
        let p = dir.join(format!("{stage}_metrics.csv"));
        if !p.is_file() {
            continue;
        }
        let m = read_metrics(&p)?;
        let enc = metric(&m, "encoding").unwrap_or_default();
        let _ = writeln!(
            summary,
            "{stage},{},{},{enc}",
            metric(&m, "accuracy").unwrap_or_default(),
            metric(&m, "flops").unwrap_or_default()
        );
        if let Some(c) = split_encoding(&enc) {
            encodings.push((stage.to_string(), c.into_iter().map(|v| v as f64).collect()));
        }
    }

    let mut curves = String::from("stage,epoch,train_loss,acc_loss,eff_value,predicted_latency_ms_or_flops,eval_accuracy\n");
    let mut loss = Vec::new();
    let mut acc = Vec::new();
    let mut eff = Vec::new();
    let mut offset = 0.0;
    for stage in STAGES {
        let p = dir.join(format!("{stage}_history.csv"));
        if !p.is_file() {
            continue;
        }
        let rows = read_history(&p)?;
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &rows {
            let _ = writeln!(
                curves,
                "{stage},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.acc_loss,
                r.eff_value,
                cell(r.predicted_latency_ms_or_flops),
                cell(r.eval_accuracy)
            );
        }
        let x = |r: &HistoryRow| offset + r.epoch as f64;
        loss.push((format!("{stage} loss"), rows.iter().map(|r| (x(r), r.train_loss)).collect()));
        let a: Vec<_> = rows.iter().filter_map(|r| r.eval_accuracy.map(|a| (x(r), a))).collect();
        if !a.is_empty() {
            acc.push((stage.to_string(), a));
        }
        let e: Vec<_> = rows
            .iter()
            .filter_map(|r| r.predicted_latency_ms_or_flops.map(|v| (x(r), v)))
            .collect();
        if !e.is_empty() {
            eff.push((stage.to_string(), e));
        }
        offset += rows.len() as f64;
    }

    write("report.csv", summary)?;
    write("curves.csv", curves)?;
    write("loss.svg", line_plot("Training loss", "epoch", "loss", &loss))?;
    write("accuracy.svg", line_plot("Eval accuracy", "epoch", "top-1", &acc))?;
    write("efficiency.svg", line_plot("Efficiency during pruning", "epoch", "Eff", &eff))?;
    let mut enc_csv = String::from("layer");
    for (s, _) in &encodings {
        enc_csv.push(',');
        enc_csv.push_str(s);
    }
    enc_csv.push('\n');
    let layers = encodings.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for l in 0..layers {
        let _ = write!(enc_csv, "{l}");
        for (_, v) in &encodings {
            let _ = write!(enc_csv, ",{}", v.get(l).map(|c| c.to_string()).unwrap_or_default());
        }
        enc_csv.push('\n');
    }
    write("encoding.csv", enc_csv)?;
    write("encoding.svg", bar_plot("Kept filters per layer", "layer", "filters", &encodings))?;
    Ok(written)
}
