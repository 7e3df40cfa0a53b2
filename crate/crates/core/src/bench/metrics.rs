//! Accuracy metrics against a known ground truth.

use crate::error::{Error, Result};
use crate::lie::RigidTransform;
use crate::spatial::PointCloud;

/// Root mean square distance between `src` mapped by the estimate and by
/// the ground truth. An empty cloud gives 0.
pub fn rmse(src: &PointCloud, estimate: &RigidTransform, truth: &RigidTransform) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let sum: f64 = src
        .points()
        .iter()
        .map(|p| (truth.apply(p) - estimate.apply(p)).norm_squared())
        .sum();
    (sum / src.len() as f64).sqrt()
}

/// Fraction of cases with RMSE strictly below `alpha`.
pub fn alpha_recall(rmses: &[f64], alpha: f64) -> Result<f64> {
    if rmses.is_empty() {
        return Err(Error::InvalidParameter("alpha recall of an empty list".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    let hits = rmses.iter().filter(|&&r| r < alpha).count();
    Ok(hits as f64 / rmses.len() as f64)
}
