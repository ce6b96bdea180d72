//! Target accuracy, convergence curves, weight distributions and run reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::PdaTask;
use crate::error::{Error, Result};
use crate::model::EtnParams;
use crate::trainer::{TrainConfig, TrainHistory};

/// Version of the `report.json` layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Number of equal-width histogram bins over `[0, 1]`.
pub const WEIGHT_BINS: usize = 20;

/// Fraction of target examples whose argmax over all source classes equals the
/// hidden label.
pub fn target_accuracy(params: &EtnParams, task: &PdaTask) -> Result<f64> {
    if task.target.is_empty() {
        return Err(Error::Usage("target domain is empty".into()));
    }
    let pred = params.predict(&task.target.features)?;
    Ok(accuracy(&pred, &task.target.labels))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Counts per bin `[k/20, (k+1)/20)`; the last bin is closed.
    pub histogram: Vec<usize>,
}

impl GroupSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let mut histogram = vec![0; WEIGHT_BINS];
        for &v in values {
            let bin = ((v * WEIGHT_BINS as f64).floor().max(0.0) as usize).min(WEIGHT_BINS - 1);
            histogram[bin] += 1;
        }
        if values.is_empty() {
            return Self {
                count: 0,
                mean: None,
                median: None,
                min: None,
                max: None,
                histogram,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            count: n,
            mean: Some(sorted.iter().sum::<f64>() / n as f64),
            median: Some(median),
            min: sorted.first().copied(),
            max: sorted.last().copied(),
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub shared: GroupSummary,
    pub outlier: GroupSummary,
}

/// Raw weights of every source example, split by whether its label is shared
/// with the target.
pub fn weight_summary(params: &EtnParams, task: &PdaTask) -> Result<WeightSummary> {
    let raw = params.transferability(&task.source.features)?;
    Ok(summarize_weights(raw.values(), &task.shared_mask()))
}

pub fn summarize_weights(raw: &[f64], shared_mask: &[bool]) -> WeightSummary {
    let pick = |want: bool| -> Vec<f64> {
        raw.iter()
            .zip(shared_mask)
            .filter(|(_, &s)| s == want)
            .map(|(w, _)| *w)
            .collect()
    };
    WeightSummary {
        shared: GroupSummary::from_values(&pick(true)),
        outlier: GroupSummary::from_values(&pick(false)),
    }
}

/// `(iteration, 1 - target accuracy)` at every log point.
pub fn error_curve(history: &TrainHistory) -> Vec<(usize, f64)> {
    history
        .records
        .iter()
        .map(|r| (r.iteration, 1.0 - r.target_acc))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalWeights {
    pub labels: Vec<usize>,
    pub shared: Vec<bool>,
    pub raw: Vec<f64>,
    /// Raw weights normalized over the whole source set.
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub final_target_accuracy: f64,
    pub history: TrainHistory,
    pub weight_summary: Option<WeightSummary>,
    pub final_weights: Option<FinalWeights>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// Equality on everything except timing.
    pub fn same_results(&self, other: &RunReport) -> bool {
        RunReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        } == RunReport {
            wall_clock_seconds: 0.0,
            ..other.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn build_report(
    params: &EtnParams,
    task: &PdaTask,
    config: &TrainConfig,
    history: TrainHistory,
    wall_clock_seconds: f64,
) -> Result<RunReport> {
    let final_target_accuracy = target_accuracy(params, task)?;
    let (weight_summary, final_weights) = if params.quantifier.is_some() {
        let raw = params.transferability(&task.source.features)?;
        let shared = task.shared_mask();
        let normalized = raw.normalize()?;
        (
            Some(summarize_weights(raw.values(), &shared)),
            Some(FinalWeights {
                labels: task.source.labels.clone(),
                shared,
                raw: raw.values().to_vec(),
                normalized: normalized.values().to_vec(),
            }),
        )
    } else {
        (None, None)
    };
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        final_target_accuracy,
        history,
        weight_summary,
        final_weights,
        wall_clock_seconds,
    })
}

const HISTORY_COLUMNS: [&str; 12] = [
    "iteration",
    "p",
    "eta",
    "mu",
    "e_gy",
    "e_gd",
    "e_aux_label",
    "e_aux_domain",
    "entropy_term",
    "target_acc",
    "mean_w_shared",
    "mean_w_outlier",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(HISTORY_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in &history.records {
        let l = &r.losses;
        w.write_record([
            r.iteration.to_string(),
            r.p.to_string(),
            r.eta.to_string(),
            r.mu.to_string(),
            l.e_gy.to_string(),
            l.e_gd.to_string(),
            l.e_aux_label.to_string(),
            l.e_aux_domain.to_string(),
            l.entropy_term.to_string(),
            r.target_acc.to_string(),
            opt(r.mean_w_shared),
            opt(r.mean_w_outlier),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per source example. Weight columns are empty for unweighted variants.
pub fn write_weights_csv(report: &RunReport, task: &PdaTask, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["index", "true_label", "is_shared", "raw_weight", "normalized_weight"])
        .map_err(|e| csv_err(path, e))?;
    let shared = task.shared_mask();
    for (i, (&label, &s)) in task.source.labels.iter().zip(&shared).enumerate() {
        let (raw, norm) = match &report.final_weights {
            Some(fw) => (fw.raw[i].to_string(), fw.normalized[i].to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([i.to_string(), label.to_string(), s.to_string(), raw, norm])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `history.csv`, `weights.csv` and, with `plot`,
/// `curves.svg` into `dir`, creating it if needed.
pub fn emit_report(report: &RunReport, task: &PdaTask, dir: &Path, plot: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    write_history_csv(&report.history, &dir.join("history.csv"))?;
    write_weights_csv(report, task, &dir.join("weights.csv"))?;
    if plot {
        let svg = dir.join("curves.svg");
        let err: Vec<(f64, f64)> = error_curve(&report.history)
            .into_iter()
            .map(|(i, e)| (i as f64, e))
            .collect();
        let mut series = vec![("target error".to_owned(), err)];
        let h = &report.history.records;
        if h.iter().any(|r| r.mean_w_shared.is_some()) {
            for (name, get) in [
                ("mean w shared", (|r: &crate::trainer::HistoryRecord| r.mean_w_shared) as fn(_) -> _),
                ("mean w outlier", |r| r.mean_w_outlier),
            ] {
                series.push((
                    name.to_owned(),
                    h.iter()
                        .filter_map(|r| get(r).map(|v| (r.iteration as f64, v)))
                        .collect(),
                ));
            }
        }
        let doc = line_chart("Training curves", "iteration", &series);
        fs::write(&svg, doc).map_err(|e| Error::io(&svg, e))?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal SVG line chart with a legend. The y axis spans the data range.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        w / 2.0,
        h - 10.0
    );
    for (v, anchor, x, y) in [
        (x0, "start", sx(x0), h - pad + 15.0),
        (x1, "end", sx(x1), h - pad + 15.0),
        (y0, "end", pad - 4.0, sy(y0)),
        (y1, "end", pad - 4.0, sy(y1) + 10.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = pad + 15.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#,
            w - pad - 120.0
        );
    }
    s.push_str("</svg>\n");
    s
}
