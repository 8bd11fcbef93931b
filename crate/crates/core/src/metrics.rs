//! Classification metrics with malignant as the positive class.

use serde::{Deserialize, Serialize};

use crate::data::Class;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    /// Recall of normal, benign and malignant; absent when the class has no
    /// samples.
    pub per_class: [Option<f64>; 3],
    pub confusion: [[usize; 3]; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl BinaryCounts {
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Area under the ROC curve via the rank statistic, ties averaged. `None`
/// unless both classes are present.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// `scores[i]` holds per-class scores for sample `i`; the prediction is
/// their argmax.
pub fn evaluate(scores: &[Vec<f64>], labels: &[Class]) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::data(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::data("no samples to evaluate"));
    }
    if let Some(row) = scores.iter().find(|s| s.len() != 3) {
        return Err(Error::data(format!("expected 3 class scores, got {}", row.len())));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (s, &l) in scores.iter().zip(labels) {
        confusion[l.index()][argmax(s)] += 1;
    }
    let m = Class::Malignant.index();
    let mut counts = BinaryCounts::default();
    for (t, row) in confusion.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            match (t == m, p == m) {
                (true, true) => counts.tp += c,
                (true, false) => counts.fn_ += c,
                (false, false) => counts.tn += c,
                (false, true) => counts.fp += c,
            }
        }
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let per_class = [0, 1, 2].map(|c| ratio(confusion[c][c], confusion[c].iter().sum()));
    let malignant_scores: Vec<f64> = scores.iter().map(|s| s[m]).collect();
    let positive: Vec<bool> = labels.iter().map(|&l| l == Class::Malignant).collect();
    Ok(MetricsReport {
        accuracy: correct as f64 / labels.len() as f64,
        sensitivity: counts.sensitivity(),
        specificity: counts.specificity(),
        auc: auc(&malignant_scores, &positive),
        per_class,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample standard deviation of the defined values.
pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(Summary { mean, sd, n })
}

pub const TABLE_COLUMNS: [&str; 7] =
    ["accuracy", "specificity", "sensitivity", "auc", "acc_normal", "acc_benign", "acc_malignant"];

impl MetricsReport {
    /// Values in [`TABLE_COLUMNS`] order.
    pub fn row(&self) -> [Option<f64>; 7] {
        [
            Some(self.accuracy),
            self.specificity,
            self.sensitivity,
            self.auc,
            self.per_class[0],
            self.per_class[1],
            self.per_class[2],
        ]
    }
}

/// Column-wise mean and standard deviation over folds.
pub fn summarize_reports(reports: &[MetricsReport]) -> Vec<Option<Summary>> {
    (0..TABLE_COLUMNS.len()).map(|c| summarize(reports.iter().map(|r| r.row()[c]))).collect()
}
