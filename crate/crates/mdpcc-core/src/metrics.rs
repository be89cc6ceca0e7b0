//! Evaluation metrics for the binary detector: per-class F1, Macro F1,
//! accuracy, and macro-averaged precision/recall, all reported as
//! percentages, plus multi-seed aggregation with mean and population
//! standard deviation.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::Veracity;

/// A 2×2 confusion matrix indexed as `n[label][prediction]` with the fake
/// class at index 0 and the real class at index 1. Counts merge additively,
/// so shards can be accumulated in any order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n: [[u64; 2]; 2],
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds counts directly from (true positive, false negative, false
    /// positive, true negative) with the fake class as positive.
    pub fn from_fake_positive(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self {
            n: [[tp, fn_], [fp, tn]],
        }
    }

    pub fn record(&mut self, label: Veracity, predicted: Veracity) {
        self.n[label.as_u8() as usize][predicted.as_u8() as usize] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for label in 0..2 {
            for pred in 0..2 {
                self.n[label][pred] += other.n[label][pred];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.n.iter().flatten().sum()
    }

    /// Per-class precision, recall, and F1 as fractions, treating `class`
    /// (0 = fake, 1 = real) as positive. Undefined ratios collapse to zero
    /// and are reported via the returned flag.
    fn class_scores(&self, class: usize) -> (f64, f64, f64, bool) {
        let other = 1 - class;
        let tp = self.n[class][class] as f64;
        let fp = self.n[other][class] as f64;
        let fn_ = self.n[class][other] as f64;
        let mut degenerate = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                degenerate = true;
                0.0
            } else {
                num / den
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        (precision, recall, f1, degenerate)
    }

    /// Computes the full metrics row from these counts.
    pub fn metrics(&self) -> Result<MetricsRow, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyCounts);
        }
        let (p_fake, r_fake, f1_fake, d_fake) = self.class_scores(0);
        let (p_real, r_real, f1_real, d_real) = self.class_scores(1);
        let correct = (self.n[0][0] + self.n[1][1]) as f64;
        Ok(MetricsRow {
            macro_f1: 100.0 * (f1_fake + f1_real) / 2.0,
            accuracy: 100.0 * correct / total as f64,
            precision: 100.0 * (p_fake + p_real) / 2.0,
            recall: 100.0 * (r_fake + r_real) / 2.0,
            f1_real: 100.0 * f1_real,
            f1_fake: 100.0 * f1_fake,
            zero_division: d_fake || d_real,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot compute metrics from zero predictions")]
    EmptyCounts,
    #[error("cannot aggregate an empty set of rows")]
    NoRows,
}

/// One evaluation's scores, all as percentages in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_real: f64,
    pub f1_fake: f64,
    /// True when any precision/recall/F1 denominator was zero (for example
    /// when the predictions or labels contain a single class) and the
    /// affected score was clamped to zero.
    pub zero_division: bool,
}

impl MetricsRow {
    fn fields(&self) -> [f64; 6] {
        [
            self.macro_f1,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1_real,
            self.f1_fake,
        ]
    }

    fn from_fields(fields: [f64; 6], zero_division: bool) -> Self {
        Self {
            macro_f1: fields[0],
            accuracy: fields[1],
            precision: fields[2],
            recall: fields[3],
            f1_real: fields[4],
            f1_fake: fields[5],
            zero_division,
        }
    }
}

/// Per-seed rows plus their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `(seed, row)` pairs in run order.
    pub rows: Vec<(u64, MetricsRow)>,
    pub mean: MetricsRow,
    /// Population standard deviation (divides by the row count, not n−1).
    pub std: MetricsRow,
}

impl MetricsReport {
    pub fn aggregate(rows: Vec<(u64, MetricsRow)>) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::NoRows);
        }
        let count = rows.len() as f64;
        let flagged = rows.iter().any(|(_, row)| row.zero_division);

        let mut mean = [0.0; 6];
        for (_, row) in &rows {
            for (slot, value) in mean.iter_mut().zip(row.fields()) {
                *slot += value;
            }
        }
        for slot in &mut mean {
            *slot /= count;
        }

        let mut var = [0.0; 6];
        for (_, row) in &rows {
            for ((slot, value), center) in var.iter_mut().zip(row.fields()).zip(mean) {
                let d = value - center;
                *slot += d * d;
            }
        }
        let std = var.map(|v| libm::sqrt(v / count));

        Ok(Self {
            rows,
            mean: MetricsRow::from_fields(mean, flagged),
            std: MetricsRow::from_fields(std, flagged),
        })
    }

    /// Renders `mean ± std` for one metric, two decimals, e.g. `79.17 ± 1.23`.
    pub fn format_pm(mean: f64, std: f64) -> String {
        alloc::format!("{mean:.2} ± {std:.2}")
    }
}
