//! Counting metrics: MAE is the mean absolute count error, MSE the root of
//! the mean squared count error (so MAE ≤ MSE always).

use crate::error::{Error, Result};

/// Evaluation summary over a dataset.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mae: f64,
    pub mse: f64,
    /// Per image: (predicted count, ground-truth count), in dataset order.
    pub per_image: Vec<(f64, f64)>,
}

/// MAE and MSE over paired predicted / ground-truth counts.
pub fn mae_mse(predicted: &[f64], ground_truth: &[f64]) -> Result<(f64, f64)> {
    if predicted.len() != ground_truth.len() || predicted.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "count vectors must match and be non-empty: {} vs {}",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let n = predicted.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (p, g) in predicted.iter().zip(ground_truth) {
        let e = p - g;
        abs_sum += e.abs();
        sq_sum += e * e;
    }
    Ok((abs_sum / n, (sq_sum / n).sqrt()))
}
