use crate::error::{HotError, Result};
use crate::linalg::Matrix;

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits
/// (already divided by the batch size). Log-sum-exp runs in FP64.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(HotError::Shape {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if logits.rows() == 0 {
        return Err(HotError::invalid("cross-entropy over an empty batch"));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(HotError::invalid(format!(
                "label {label} out of range for {} classes",
                logits.cols()
            )));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label] as f64;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] as f64 - lse).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            *g = ((p - target) / n) as f32;
        }
    }
    Ok((total / n, grad))
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Matrix::zeros(3, 4);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.get(0, 0) - (0.25 - 1.0) / 3.0).abs() < 1e-7);
        assert!((grad.get(0, 1) - 0.25 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Matrix::from_rows(&[[1000.0, -1000.0], [-1000.0, 1000.0]]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 0]).unwrap();
        assert!(loss.is_finite() && grad.all_finite());
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(softmax_cross_entropy(&Matrix::zeros(1, 2), &[2]).is_err());
        assert!(softmax_cross_entropy(&Matrix::zeros(2, 2), &[0]).is_err());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]]);
        assert!((accuracy(&logits, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-12);
    }
}
