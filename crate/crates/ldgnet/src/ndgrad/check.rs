//! Finite-difference verification of analytic gradients.

use super::{DiffTensor, GradError, Graph, Result};

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences at `point`, one coordinate at a time.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &DiffTensor) -> Result<DiffTensor>,
{
    assert!(h > 0.0, "step must be positive");

    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.to_vec(), shape, true)?;
        let loss = f(&mut g, &x)?;
        if loss.numel() != 1 {
            return Err(GradError::NonScalarLoss(loss.shape().to_vec()));
        }
        let grads = g.backward(&loss)?;
        grads.wrt_or_zero(&x)
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(data, shape, false)?;
        let loss = f(&mut g, &x)?;
        let v = loss.scalar();
        if !v.is_finite() {
            return Err(GradError::NonFinite("finite_diff_check"));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += h;
        let mut minus = point.to_vec();
        minus[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - central).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
