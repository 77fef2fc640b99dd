//! Confusion counts and accuracy / precision / recall / F1 summaries for the
//! five-class localization task and the binary anomaly task.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ORGAN_COUNT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("truth has {truth} entries but predictions have {predictions}")]
    LengthMismatch { truth: usize, predictions: usize },
    #[error("class index {index} out of range for {k} classes")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("confusion matrix is empty")]
    EmptyCounts,
    #[error("cannot merge {0}-class counts with {1}-class counts")]
    ClassCountMismatch(usize, usize),
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(k: usize) -> Self {
        ConfusionCounts {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let k = rows.len();
        let mut counts = Vec::with_capacity(k * k);
        for row in rows {
            if row.len() != k {
                return Err(MetricsError::IndexOutOfRange { index: row.len(), k });
            }
            counts.extend_from_slice(row);
        }
        Ok(ConfusionCounts { k, counts })
    }

    pub fn accumulate(
        truth: &[usize],
        predictions: &[usize],
        k: usize,
    ) -> Result<Self, MetricsError> {
        if truth.len() != predictions.len() {
            return Err(MetricsError::LengthMismatch {
                truth: truth.len(),
                predictions: predictions.len(),
            });
        }
        let mut out = Self::zeros(k);
        for (&t, &p) in truth.iter().zip(predictions) {
            for index in [t, p] {
                if index >= k {
                    return Err(MetricsError::IndexOutOfRange { index, k });
                }
            }
            out.counts[t * k + p] += 1;
        }
        Ok(out)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<(), MetricsError> {
        if self.k != other.k {
            return Err(MetricsError::ClassCountMismatch(self.k, other.k));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Counts as a fixed 5×5 array, for emission estimation.
    pub fn to_organ_matrix(&self) -> Option<[[u64; ORGAN_COUNT]; ORGAN_COUNT]> {
        if self.k != ORGAN_COUNT {
            return None;
        }
        let mut out = [[0; ORGAN_COUNT]; ORGAN_COUNT];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.get(i, j);
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over classes of per-class precision, recall and F1.
    Macro,
    /// Metrics of class 1 only.
    BinaryPositive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some denominator was zero and a 0 was substituted.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Classes whose precision or recall had a zero denominator.
    pub undefined_classes: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_scores(counts: &ConfusionCounts, class: usize) -> ClassScores {
    let tp = counts.get(class, class);
    let predicted: u64 = (0..counts.k).map(|i| counts.get(i, class)).sum();
    let actual: u64 = (0..counts.k).map(|j| counts.get(class, j)).sum();
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, actual);
    let p = precision.unwrap_or(0.0);
    let r = recall.unwrap_or(0.0);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    ClassScores {
        precision: p,
        recall: r,
        f1,
        undefined: precision.is_none() || recall.is_none(),
    }
}

pub fn summarize(counts: &ConfusionCounts, averaging: Averaging) -> Result<MetricSummary, MetricsError> {
    let total = counts.total();
    if total == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let accuracy = counts.trace() as f64 / total as f64;
    let classes: Vec<usize> = match averaging {
        Averaging::Macro => (0..counts.k).collect(),
        Averaging::BinaryPositive => {
            if counts.k != 2 {
                return Err(MetricsError::IndexOutOfRange { index: 1, k: counts.k });
            }
            vec![1]
        }
    };
    let scores: Vec<ClassScores> = classes.iter().map(|&c| class_scores(counts, c)).collect();
    let n = scores.len() as f64;
    Ok(MetricSummary {
        accuracy,
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        undefined_classes: classes
            .iter()
            .zip(&scores)
            .filter(|(_, s)| s.undefined)
            .map(|(&c, _)| c)
            .collect(),
    })
}

impl MetricSummary {
    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(out, "f1={:.6}", self.f1);
        let _ = writeln!(out, "precision={:.6}", self.precision);
        let _ = writeln!(out, "recall={:.6}", self.recall);
        let undefined: Vec<String> = self.undefined_classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "undefined_classes={}", undefined.join(";"));
        out
    }

    /// One row in the results-table column order: accuracy, F1, precision, recall.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.f1, self.precision, self.recall
        )
    }
}

pub const TABLE_HEADER: &str = "method,accuracy,f1,precision,recall";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accumulate_basics() {
        let c = ConfusionCounts::accumulate(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(c.trace(), 3);
        let c = ConfusionCounts::accumulate(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!((c.get(0, 1), c.get(1, 0), c.trace()), (1, 1, 0));
        assert!(matches!(
            ConfusionCounts::accumulate(&[0], &[0, 1], 2),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            ConfusionCounts::accumulate(&[0], &[2], 2),
            Err(MetricsError::IndexOutOfRange { index: 2, k: 2 })
        ));
    }

    #[test]
    fn binary_fixture() {
        let c = ConfusionCounts::from_rows(&[vec![85, 5], vec![5, 5]]).unwrap();
        let s = summarize(&c, Averaging::BinaryPositive).unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.accuracy), (0.5, 0.5, 0.5, 0.9));
    }

    #[test]
    fn perfect_and_empty() {
        let c = ConfusionCounts::accumulate(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4], 5).unwrap();
        let s = summarize(&c, Averaging::Macro).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(summarize(&ConfusionCounts::zeros(5), Averaging::Macro), Err(MetricsError::EmptyCounts));
    }

    #[test]
    fn zero_support_is_flagged() {
        let c = ConfusionCounts::accumulate(&[0, 0, 1], &[0, 0, 1], 3).unwrap();
        let s = summarize(&c, Averaging::Macro).unwrap();
        assert_eq!(s.undefined_classes, vec![2]);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    fn counts_strategy(k: usize) -> impl Strategy<Value = ConfusionCounts> {
        prop::collection::vec(0u64..50, k * k)
            .prop_filter("non-empty", |v| v.iter().sum::<u64>() > 0)
            .prop_map(move |counts| ConfusionCounts { k, counts })
    }

    proptest! {
        #[test]
        fn metric_identities(c in counts_strategy(5)) {
            let s = summarize(&c, Averaging::Macro).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.accuracy));
            for class in 0..5 {
                let cs = class_scores(&c, class);
                if cs.precision > 0.0 && cs.recall > 0.0 {
                    let hm = 2.0 / (1.0 / cs.precision + 1.0 / cs.recall);
                    prop_assert!((cs.f1 - hm).abs() < 1e-12);
                } else {
                    prop_assert_eq!(cs.f1, 0.0);
                }
            }
        }

        #[test]
        fn macro_is_relabel_invariant(c in counts_strategy(5), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let mut p = ConfusionCounts::zeros(5);
            for i in 0..5 {
                for j in 0..5 {
                    p.counts[perm[i] * 5 + perm[j]] = c.get(i, j);
                }
            }
            let a = summarize(&c, Averaging::Macro).unwrap();
            let b = summarize(&p, Averaging::Macro).unwrap();
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.recall - b.recall).abs() < 1e-12);
        }

        #[test]
        fn merge_matches_concatenation(
            a in prop::collection::vec((0usize..5, 0usize..5), 1..200),
            b in prop::collection::vec((0usize..5, 0usize..5), 1..200),
        ) {
            let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
            let (ta, pa) = split(&a);
            let (tb, pb) = split(&b);
            let mut merged = ConfusionCounts::accumulate(&ta, &pa, 5).unwrap();
            merged.merge(&ConfusionCounts::accumulate(&tb, &pb, 5).unwrap()).unwrap();
            let all: Vec<_> = a.iter().chain(&b).copied().collect();
            let (t, p) = split(&all);
            prop_assert_eq!(merged, ConfusionCounts::accumulate(&t, &p, 5).unwrap());
        }
    }
}
