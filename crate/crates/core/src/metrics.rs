//! Sequence-level tracking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{FearError, Result};
use crate::geometry::BBox;

/// Center-error threshold for the precision score, in pixels.
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub frames: usize,
    pub mean_iou: f64,
    /// Fraction of frames with IoU above 0.5.
    pub success_50: f64,
    /// Fraction of frames with IoU above 0.75.
    pub success_75: f64,
    /// Fraction of frames whose center error is within 20 px.
    pub precision_20: f64,
}

pub fn evaluate(predicted: &[BBox], ground_truth: &[BBox]) -> Result<EvalMetrics> {
    if predicted.len() != ground_truth.len() {
        return Err(FearError::LengthMismatch(format!(
            "{} predictions for {} annotated frames",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let n = predicted.len();
    if n == 0 {
        return Err(FearError::LengthMismatch("no frames to evaluate".into()));
    }
    let ious: Vec<f64> = predicted.iter().zip(ground_truth).map(|(p, g)| p.iou(g)).collect();
    let frac = |f: &dyn Fn(usize) -> bool| (0..n).filter(|&i| f(i)).count() as f64 / n as f64;
    Ok(EvalMetrics {
        frames: n,
        mean_iou: ious.iter().sum::<f64>() / n as f64,
        success_50: frac(&|i| ious[i] > 0.5),
        success_75: frac(&|i| ious[i] > 0.75),
        precision_20: frac(&|i| {
            predicted[i].center_distance(&ground_truth[i]) <= PRECISION_THRESHOLD_PX
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_mixed_tracks() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 4];
        let m = evaluate(&gt, &gt).unwrap();
        assert_eq!((m.mean_iou, m.success_50, m.success_75, m.precision_20), (1.0, 1.0, 1.0, 1.0));
        let pred = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 0.0, 10.0, 5.0),
            BBox::new(5.0, 0.0, 15.0, 10.0),
            BBox::new(100.0, 100.0, 110.0, 110.0),
        ];
        let m = evaluate(&pred, &gt).unwrap();
        let expected = (1.0 + 0.5 + 1.0 / 3.0 + 0.0) / 4.0;
        assert!((m.mean_iou - expected).abs() < 1e-12);
        assert_eq!(m.success_50, 0.25);
        assert_eq!(m.success_75, 0.25);
        assert_eq!(m.precision_20, 0.75);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(evaluate(&[b], &[b, b]), Err(FearError::LengthMismatch(_))));
    }
}
