//! Confusion-matrix classification metrics: overall accuracy, per-class
//! accuracy (recall), and Cohen's kappa.

use serde::Serialize;

/// Rows index ground truth, columns index predictions.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub kappa: f64,
    pub ca: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

/// kappa = (OA - p_e) / (1 - p_e) with p_e the chance agreement from the
/// row/column marginals. Degenerate single-cell matrices (p_e = 1) take
/// kappa = 1 when that cell is diagonal, 0 otherwise.
pub fn metrics_from_confusion(confusion: &[Vec<u64>]) -> Metrics {
    let c = confusion.len();
    assert!(confusion.iter().all(|row| row.len() == c), "confusion matrix must be square");
    let total: u64 = confusion.iter().flatten().sum();
    assert!(total > 0, "empty confusion matrix");

    let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
    let oa = trace as f64 / total as f64;

    let row_sums: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let t2 = (total as f64) * (total as f64);
    let pe: f64 = (0..c).map(|i| row_sums[i] as f64 * col_sums[i] as f64 / t2).sum();

    let kappa = if (1.0 - pe).abs() < 1e-15 {
        if (oa - 1.0).abs() < 1e-15 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };

    let ca: Vec<f64> = (0..c)
        .map(|i| if row_sums[i] == 0 { 0.0 } else { confusion[i][i] as f64 / row_sums[i] as f64 })
        .collect();

    Metrics { oa, kappa, ca, confusion: confusion.to_vec() }
}
