//! Evaluation arithmetic for the three emotion levels: confusion matrix,
//! per-class precision/recall/F1, macro and weighted F1, accuracy.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EmotionLevel;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label sequences differ in length ({truth} true vs {predicted} predicted)")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} at position {index} is outside 0..{NUM_CLASSES}")]
    LabelOutOfRange { index: usize, label: usize },
    #[error("no labels to evaluate")]
    EmptyInput,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

/// Raw counts; rows are true emotion levels, columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..NUM_CLASSES).all(|i| (0..NUM_CLASSES).all(|j| i == j || self.counts[i][j] == 0))
    }

    /// Writes the matrix as CSV with a labeled header row and a label column.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(EmotionLevel::ALL.iter().map(|l| l.label()));
        writer.write_record(&header)?;
        for level in EmotionLevel::ALL {
            let mut row = vec![level.label()];
            row.extend(self.counts[level.index()].iter().map(|c| c.to_string()));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
    }
    if truth.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut matrix = ConfusionMatrix::default();
    for (index, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        for label in [t, p] {
            if label >= NUM_CLASSES {
                return Err(MetricsError::LabelOutOfRange { index, label });
            }
        }
        matrix.counts[t][p] += 1;
    }
    Ok(matrix)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    let denom = precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        precision * (2.0 * recall / denom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: EmotionLevel,
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when precision or recall had a zero denominator and was defined as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics report serializes")
    }
}

fn ratio(num: u64, denom: u64) -> Option<f64> {
    (denom != 0).then(|| num as f64 / denom as f64)
}

pub fn report(confusion: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = confusion.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let per_class = EmotionLevel::ALL.map(|label| {
        let c = label.index();
        let hits = confusion.counts[c][c];
        let support = confusion.row_sum(c);
        let predicted = confusion.column_sum(c);
        let precision = ratio(hits, predicted);
        let recall = ratio(hits, support);
        let undefined = precision.is_none() || recall.is_none();
        let (precision, recall) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
        ClassMetrics { label, support, predicted, precision, recall, f1: f1_from_pr(precision, recall), undefined }
    });
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / NUM_CLASSES as f64;
    let weighted_f1 = per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / total as f64;
    Ok(MetricsReport {
        confusion: *confusion,
        per_class,
        macro_f1,
        weighted_f1,
        accuracy: confusion.trace() as f64 / total as f64,
        total,
    })
}

/// Convenience: tally then summarize.
pub fn evaluate_labels(truth: &[usize], predicted: &[usize]) -> Result<MetricsReport, MetricsError> {
    report(&confusion_matrix(truth, predicted)?)
}
