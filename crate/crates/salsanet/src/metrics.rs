//! Confusion-matrix accumulation and per-class precision, recall and
//! intersection-over-union.
//!
//! Scores follow the usual set algebra: for class `i` with true positives
//! TP = counts[i][i], false positives FP (column sum minus TP) and false
//! negatives FN (row sum minus TP), precision is TP/(TP+FP), recall
//! TP/(TP+FN) and IoU TP/(TP+FP+FN). A class absent from both prediction
//! and ground truth scores a vacuous 1.0; any other empty denominator
//! scores 0.0.

use crate::autolabel::ClassId;
use crate::projection::LabelGrid;

/// Errors from metric accumulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    /// Prediction and ground-truth grids have different shapes.
    DimensionMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
}

impl std::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricsError::DimensionMismatch { pred, gt } => write!(
                f,
                "grid dimensions differ: prediction {}x{}, ground truth {}x{}",
                pred.0, pred.1, gt.0, gt.1
            ),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Precision, recall and IoU of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

/// 3x3 confusion counts: `counts[g][p]` is the number of cells with ground
/// truth `g` predicted as `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; ClassId::COUNT]; ClassId::COUNT],
}

impl ConfusionMatrix {
    pub fn new() -> ConfusionMatrix {
        ConfusionMatrix::default()
    }

    pub fn counts(&self) -> &[[u64; ClassId::COUNT]; ClassId::COUNT] {
        &self.counts
    }

    /// Total number of evaluated cells.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds one prediction/ground-truth grid pair.
    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<(), MetricsError> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(MetricsError::DimensionMismatch {
                pred: (pred.height(), pred.width()),
                gt: (gt.height(), gt.width()),
            });
        }
        for (p, g) in pred.data().iter().zip(gt.data()) {
            self.counts[g.as_index()][p.as_index()] += 1;
        }
        Ok(())
    }

    /// Adds already-paired label sequences (point-level evaluation).
    pub fn accumulate_labels(&mut self, pred: &[ClassId], gt: &[ClassId]) -> Result<(), MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::DimensionMismatch {
                pred: (pred.len(), 1),
                gt: (gt.len(), 1),
            });
        }
        for (p, g) in pred.iter().zip(gt) {
            self.counts[g.as_index()][p.as_index()] += 1;
        }
        Ok(())
    }

    /// Folds another matrix in; accumulation order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, oc) in row.iter_mut().zip(orow) {
                *c += oc;
            }
        }
    }

    /// Precision, recall and IoU of one class under the absent-class
    /// convention described at module level.
    pub fn class_scores(&self, class: ClassId) -> ClassScores {
        let i = class.as_index();
        let tp = self.counts[i][i];
        let fp: u64 = (0..ClassId::COUNT).map(|g| self.counts[g][i]).sum::<u64>() - tp;
        let fn_: u64 = self.counts[i].iter().sum::<u64>() - tp;
        let absent = tp + fp + fn_ == 0;
        let ratio = |num: u64, den: u64| -> f64 {
            if den > 0 {
                num as f64 / den as f64
            } else if absent {
                1.0
            } else {
                0.0
            }
        };
        ClassScores {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            iou: ratio(tp, tp + fp + fn_),
        }
    }

    /// Unweighted mean of the three per-class IoU values.
    pub fn mean_iou(&self) -> f64 {
        mean_iou_of(ClassId::ALL.map(|c| self.class_scores(c).iou))
    }

    /// Evaluation report: one row per class with percentages to two
    /// decimals, then a mean-IoU row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,iou\n");
        for class in ClassId::ALL {
            let s = self.class_scores(class);
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2}\n",
                class.name(),
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.iou
            ));
        }
        out.push_str(&format!("mean,,,{:.2}\n", 100.0 * self.mean_iou()));
        out
    }
}

/// Unweighted mean of per-class IoU values.
pub fn mean_iou_of(ious: [f64; ClassId::COUNT]) -> f64 {
    ious.iter().sum::<f64>() / ClassId::COUNT as f64
}
