//! Evaluation reports: per-split AUC/AP, split averages and the stability
//! area, serialized as JSON and as a plain-text table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{average_auc, average_precision, roc_auc, stability_area, ScoredSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMetrics {
    pub split: String,
    pub auc: f64,
    /// Absent when the split has no positives.
    pub ap: Option<f64>,
    pub num_real: usize,
    pub num_fake: usize,
}

impl SplitMetrics {
    pub fn compute(split: impl Into<String>, set: &ScoredSet) -> Result<Self> {
        Ok(Self {
            split: split.into(),
            auc: roc_auc(set)?,
            ap: average_precision(set).ok(),
            num_real: set.negatives(),
            num_fake: set.positives(),
        })
    }
}

/// One model evaluated over one or more splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: String,
    pub splits: Vec<SplitMetrics>,
    pub average_auc: f64,
    pub stability_area: f64,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, splits: Vec<SplitMetrics>) -> Result<Self> {
        let aucs: Vec<f64> = splits.iter().map(|s| s.auc).collect();
        if aucs.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one split".into()));
        }
        Ok(Self {
            model: model.into(),
            average_auc: average_auc(&aucs)?,
            stability_area: stability_area(&aucs)?,
            splits,
        })
    }

    /// Summary of externally supplied per-split AUCs (any scale).
    pub fn from_aucs(model: impl Into<String>, names: &[String], aucs: &[f64]) -> Result<Self> {
        if names.len() != aucs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} split names for {} AUC values",
                names.len(),
                aucs.len()
            )));
        }
        let splits = names
            .iter()
            .zip(aucs)
            .map(|(n, &auc)| SplitMetrics {
                split: n.clone(),
                auc,
                ap: None,
                num_real: 0,
                num_fake: 0,
            })
            .collect();
        Self::new(model, splits)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Rows are models, columns are splits (union in first-seen order) followed
/// by the average and the stability area. AUCs are printed in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    for r in reports {
        for s in &r.splits {
            if !columns.contains(&s.split.as_str()) {
                columns.push(&s.split);
            }
        }
    }
    let name_w = reports
        .iter()
        .map(|r| r.model.len())
        .chain(std::iter::once("model".len()))
        .max()
        .unwrap_or(5);
    let col_w: Vec<usize> = columns.iter().map(|c| c.len().max(7)).collect();

    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "model");
    for (c, w) in columns.iter().zip(&col_w) {
        let _ = write!(out, "  {c:>w$}");
    }
    let _ = writeln!(out, "  {:>7}  {:>7}", "Average", "Area");
    for r in reports {
        let _ = write!(out, "{:<name_w$}", r.model);
        for (c, w) in columns.iter().zip(&col_w) {
            match r.splits.iter().find(|s| s.split == *c) {
                Some(s) => {
                    let _ = write!(out, "  {:>w$.2}", 100.0 * s.auc);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        let _ = writeln!(
            out,
            "  {:>7.2}  {:>7.2}",
            100.0 * r.average_auc,
            100.0 * r.stability_area
        );
    }
    out
}
