//! Ranking metrics and cross-split summaries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores and binary labels aligned by index (label 1 = positive / fake).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "scored set needs equal non-zero lengths, got {} scores and {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::non_finite("scores", i));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }
}

fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores")
}

/// Mann-Whitney AUC with half credit for ties, via average ranks.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let p = set.positives();
    let n = set.negatives();
    if p == 0 || n == 0 {
        return Err(Error::AucUndefined(format!(
            "{p} positives and {n} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(by_score(&set.scores));
    // Sum of (doubled) average ranks of the positives; doubling keeps it integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean (i + j + 2) / 2
        let pos_in_tie = order[i..=j].iter().filter(|&&k| set.labels[k] == 1).count() as u64;
        rank_sum2 += pos_in_tie * (i + j + 2) as u64;
        i = j + 1;
    }
    let u2 = rank_sum2 - (p * (p + 1)) as u64;
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Mean precision at the rank of each positive. Ranking is by descending
/// score, ties broken by ascending original index.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::ApUndefined("no positive samples".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|a, b| by_score(&set.scores)(b, a).then(a.cmp(b)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if set.labels[k] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

pub fn average_auc(split_aucs: &[f64]) -> Result<f64> {
    if split_aucs.is_empty() {
        return Err(Error::InvalidArgument("no split AUCs to average".into()));
    }
    Ok(split_aucs.iter().sum::<f64>() / split_aucs.len() as f64)
}

/// Sum of absolute deviations of the split AUCs from their mean.
pub fn stability_area(split_aucs: &[f64]) -> Result<f64> {
    let mean = average_auc(split_aucs)?;
    Ok(split_aucs.iter().map(|a| (a - mean).abs()).sum())
}
