use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "CIDEr-D")]
    CiderD,
    #[serde(rename = "vqa_accuracy")]
    VqaAccuracy,
    #[serde(rename = "auc_roc")]
    AucRoc,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Captioning => Metric::CiderD,
            Task::Vqa => Metric::VqaAccuracy,
            Task::RankClassification => Metric::AucRoc,
        }
    }

    fn bounded(self) -> bool {
        !matches!(self, Metric::CiderD)
    }

    fn format(self, v: f64) -> String {
        if self.bounded() {
            format!("{v:.4}")
        } else {
            format!("{v:.2}")
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::CiderD => "CIDEr-D",
            Metric::VqaAccuracy => "vqa_accuracy",
            Metric::AucRoc => "auc_roc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Shot count, or "Avg".
    pub label: String,
    /// One value per mode, in `MetricReport::modes` order.
    pub values: Vec<Option<f64>>,
}

/// Shot counts down, retriever modes across, with a closing Avg row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub metric: Metric,
    pub modes: Vec<String>,
    pub shot_counts: Vec<usize>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

/// Builds the table from `(mode, shots) -> value` cells.
///
/// Missing cells stay empty and are listed in `diagnostics`; the Avg of a mode
/// with any missing cell is empty too.
pub fn shot_sweep_report(
    task: Task,
    metric: Metric,
    modes: &[String],
    shot_counts: &[usize],
    cells: &BTreeMap<(String, usize), f64>,
    metadata: BTreeMap<String, String>,
) -> Result<MetricReport> {
    for ((mode, shots), v) in cells {
        if !v.is_finite() || (metric.bounded() && !(0.0..=1.0).contains(v)) {
            return Err(Error::Eval(format!("{metric} value {v} for {mode} at {shots} shots is out of range")));
        }
    }
    let mut diagnostics = Vec::new();
    let mut rows: Vec<ReportRow> = shot_counts
        .iter()
        .map(|&n| ReportRow {
            label: n.to_string(),
            values: modes
                .iter()
                .map(|m| {
                    let v = cells.get(&(m.clone(), n)).copied();
                    if v.is_none() {
                        diagnostics.push(format!("missing {metric} for {m} at {n} shots"));
                    }
                    v
                })
                .collect(),
        })
        .collect();
    let avg = (0..modes.len())
        .map(|c| {
            let col: Option<Vec<f64>> = rows.iter().map(|r| r.values[c]).collect();
            col.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    rows.push(ReportRow {
        label: "Avg".into(),
        values: avg,
    });
    for d in &diagnostics {
        log::warn!("{d}");
    }
    Ok(MetricReport {
        task,
        metric,
        modes: modes.to_vec(),
        shot_counts: shot_counts.to_vec(),
        rows,
        metadata,
        diagnostics,
    })
}

impl MetricReport {
    /// Aligned plain-text table; absent cells print as "-".
    pub fn render_table(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                r.values
                    .iter()
                    .map(|v| v.map_or_else(|| "-".to_string(), |v| self.metric.format(v)))
                    .collect()
            })
            .collect();
        let first = self.rows.iter().map(|r| r.label.len()).chain([5]).max().unwrap_or(5);
        let widths: Vec<usize> = self
            .modes
            .iter()
            .enumerate()
            .map(|(c, m)| cells.iter().map(|r| r[c].len()).chain([m.len()]).max().unwrap_or(1))
            .collect();
        let mut out = format!("{} ({})\n", self.metric, self.task);
        out.push_str(&format!("{:<first$}", "Shots"));
        for (m, w) in self.modes.iter().zip(&widths) {
            out.push_str(&format!("  {m:>w$}"));
        }
        out.push('\n');
        for (row, vals) in self.rows.iter().zip(&cells) {
            out.push_str(&format!("{:<first$}", row.label));
            for (v, w) in vals.iter().zip(&widths) {
                out.push_str(&format!("  {v:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}
