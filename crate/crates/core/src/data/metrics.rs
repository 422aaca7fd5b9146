//! Position-error metric and the naive forecasting baseline.

use super::{Pose, PoseSequence};
use crate::{Error, Result};

/// Mean per-joint position error in millimetres: the Euclidean distance
/// between predicted and true joint positions, averaged over frames and
/// joints. (Reported unsquared, the standard convention for errors quoted
/// in millimetres.)
pub fn mpjpe(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!(
            "frame count mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("empty prediction".into()));
    }
    let joints = gt[0].joints();
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.joints() != joints || g.joints() != joints {
            return Err(Error::Metric("joint count mismatch".into()));
        }
        for (pc, gc) in p.coords.iter().zip(&g.coords) {
            let dx = pc[0] - gc[0];
            let dy = pc[1] - gc[1];
            let dz = pc[2] - gc[2];
            total += (dx * dx + dy * dy + dz * dz).sqrt();
        }
    }
    Ok(total / (pred.len() * joints) as f64)
}

/// Predict every future frame as a copy of the last observed pose.
pub fn zero_velocity_baseline(observed: &PoseSequence, horizon: usize) -> Result<Vec<Pose>> {
    let last = observed
        .frames
        .last()
        .ok_or_else(|| Error::Argument("empty observation".into()))?;
    Ok(vec![last.clone(); horizon])
}
