//! Training objectives: triplet loss on template/search/negative embeddings,
//! IoU loss on decoded boxes, focal loss on the score map, their weighted sum,
//! and the per-cell target encoding.
//!
//! Every loss comes with an analytic gradient used by the trainer.

use ndarray::{Array2, Array3, ArrayView, ArrayView1, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{FearError, Result};
use crate::float::{sigmoid, Float};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub gamma: f64,
    /// Triplet weight.
    pub lambda1: f64,
    /// IoU weight.
    pub lambda2: f64,
    /// Focal weight.
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            gamma: 2.0,
            lambda1: 0.5,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(FearError::config("margin", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(FearError::config("gamma", "must be non-negative"));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) {
                return Err(FearError::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

fn distance<T: Float>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    Zip::from(&a)
        .and(&b)
        .fold(T::zero(), |acc, &x, &y| acc + (x - y) * (x - y))
        .sqrt()
}

/// `max(‖e_T - e_S‖ - ‖e_T - e_N‖ + margin, 0)`.
pub fn triplet_loss<T: Float>(
    e_t: ArrayView1<'_, T>,
    e_s: ArrayView1<'_, T>,
    e_n: ArrayView1<'_, T>,
    margin: f64,
) -> T {
    (distance(e_t, e_s) - distance(e_t, e_n) + T::c(margin)).max(T::zero())
}

/// Gradients `(d e_T, d e_S, d e_N)` of [`triplet_loss`]; zero when the hinge
/// is inactive.
pub fn triplet_grad<T: Float>(
    e_t: ArrayView1<'_, T>,
    e_s: ArrayView1<'_, T>,
    e_n: ArrayView1<'_, T>,
    margin: f64,
) -> (ndarray::Array1<T>, ndarray::Array1<T>, ndarray::Array1<T>) {
    let n = e_t.len();
    let zero = || ndarray::Array1::zeros(n);
    let d_ts = distance(e_t, e_s);
    let d_tn = distance(e_t, e_n);
    if d_ts - d_tn + T::c(margin) <= T::zero() {
        return (zero(), zero(), zero());
    }
    let eps = T::c(1e-12);
    let u = (&e_t - &e_s) / d_ts.max(eps);
    let v = (&e_t - &e_n) / d_tn.max(eps);
    let d_t = &u - &v;
    let d_s = u.mapv(|x| -x);
    (d_t, d_s, v)
}

/// Result of [`iou_loss`]. `empty` flags a batch without positive cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouLoss {
    pub value: f64,
    pub empty: bool,
}

/// `1 - mean IoU` over the masked rows of `N x 4` xyxy box arrays.
pub fn iou_loss<T: Float>(pred: &Array2<T>, target: &Array2<T>, mask: &[bool]) -> IouLoss {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            sum += box_iou(pred.row(i), target.row(i)).f64();
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("iou loss called without positive cells");
        return IouLoss {
            value: 0.0,
            empty: true,
        };
    }
    IouLoss {
        value: 1.0 - sum / count as f64,
        empty: false,
    }
}

fn box_iou<T: Float>(p: ArrayView1<'_, T>, t: ArrayView1<'_, T>) -> T {
    let iw = (p[2].min(t[2]) - p[0].max(t[0])).max(T::zero());
    let ih = (p[3].min(t[3]) - p[1].max(t[1])).max(T::zero());
    let inter = iw * ih;
    let ap = (p[2] - p[0]) * (p[3] - p[1]);
    let at = (t[2] - t[0]) * (t[3] - t[1]);
    let union = ap + at - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Gradient of [`iou_loss`] w.r.t. the predicted boxes.
pub fn iou_loss_grad<T: Float>(pred: &Array2<T>, target: &Array2<T>, mask: &[bool]) -> Array2<T> {
    let mut grad = Array2::zeros(pred.raw_dim());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return grad;
    }
    let scale = -T::one() / T::c(count as f64);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let p = pred.row(i);
        let t = target.row(i);
        let iw_raw = p[2].min(t[2]) - p[0].max(t[0]);
        let ih_raw = p[3].min(t[3]) - p[1].max(t[1]);
        let (iw, ih) = (iw_raw.max(T::zero()), ih_raw.max(T::zero()));
        let inter = iw * ih;
        let pw = p[2] - p[0];
        let ph = p[3] - p[1];
        let union = pw * ph + (t[2] - t[0]) * (t[3] - t[1]) - inter;
        if union <= T::zero() {
            continue;
        }
        let overlapping = iw_raw > T::zero() && ih_raw > T::zero();
        let mut d_inter = [T::zero(); 4];
        if overlapping {
            if p[0] > t[0] {
                d_inter[0] = -ih;
            }
            if p[2] < t[2] {
                d_inter[2] = ih;
            }
            if p[1] > t[1] {
                d_inter[1] = -iw;
            }
            if p[3] < t[3] {
                d_inter[3] = iw;
            }
        }
        let d_area = [-ph, -pw, ph, pw];
        for k in 0..4 {
            let d_union = d_area[k] - d_inter[k];
            let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
            grad[[i, k]] = scale * d_iou;
        }
    }
    grad
}

const P_CLAMP: f64 = 1e-7;

fn focal_terms<T: Float>(logit: T, label: i8, gamma: f64) -> (T, T) {
    let p = sigmoid(logit);
    let positive = label == 1;
    let raw_pt = if positive { p } else { T::one() - p };
    let lo = T::c(P_CLAMP);
    let hi = T::c(1.0 - P_CLAMP);
    let pt = raw_pt.max(lo).min(hi);
    let g = T::c(gamma);
    let one_minus = T::one() - pt;
    let loss = -one_minus.powf(g) * pt.ln();
    let clamped = raw_pt < lo || raw_pt > hi;
    let grad = if clamped {
        T::zero()
    } else {
        let d_pt = if gamma == 0.0 {
            -T::one() / pt
        } else {
            g * one_minus.powf(g - T::one()) * pt.ln() - one_minus.powf(g) / pt
        };
        let dp_dx = p * (T::one() - p);
        if positive {
            d_pt * dp_dx
        } else {
            -d_pt * dp_dx
        }
    };
    (loss, grad)
}

/// Mean focal loss over all positions; labels are `1` (target) or `-1`.
pub fn focal_loss<T: Float, D: Dimension>(
    logits: ArrayView<'_, T, D>,
    labels: ArrayView<'_, i8, D>,
    gamma: f64,
) -> T {
    let n = T::c(logits.len().max(1) as f64);
    Zip::from(&logits)
        .and(&labels)
        .fold(T::zero(), |acc, &x, &y| acc + focal_terms(x, y, gamma).0)
        / n
}

pub fn focal_grad<T: Float, D: Dimension>(
    logits: ArrayView<'_, T, D>,
    labels: ArrayView<'_, i8, D>,
    gamma: f64,
) -> ndarray::Array<T, D> {
    let n = T::c(logits.len().max(1) as f64);
    let mut out = logits.to_owned();
    Zip::from(&mut out)
        .and(&labels)
        .for_each(|o, &y| *o = focal_terms(*o, y, gamma).1 / n);
    out
}

pub fn total_loss(l_t: f64, l_reg: f64, l_c: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * l_t + cfg.lambda2 * l_reg + cfg.lambda3 * l_c
}

/// Per-cell `(l, t, r, b)` distances in crop pixels and the cells whose
/// centers fall inside the box (inclusive of the border).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTargets {
    pub targets: Array3<f64>,
    pub positive_mask: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTargets {
    pub regression: RegressionTargets,
    /// `1` inside the box shrunk by half about its center, `-1` elsewhere.
    pub cls_labels: Array2<i8>,
}

/// Shrink factor of the positive classification region.
pub const CLS_POSITIVE_SHRINK: f64 = 0.5;

/// Center of map cell `(row, col)` in crop pixels.
pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    (col as f64 * s + s / 2.0, row as f64 * s + s / 2.0)
}

pub fn encode_targets(gt: &BBox, stride: usize, map_side: usize) -> Result<EncodedTargets> {
    let extent = (stride * map_side) as f64;
    if !gt.has_positive_area() {
        return Err(FearError::DegenerateBox(format!("{gt:?}")));
    }
    if !BBox::new(0.0, 0.0, extent, extent).contains_box(gt) {
        return Err(FearError::BoxOutOfBounds(format!(
            "{gt:?} outside a {extent}px crop"
        )));
    }
    let shrunk = gt.scale_about_center(CLS_POSITIVE_SHRINK, CLS_POSITIVE_SHRINK);
    let mut targets = Array3::zeros((4, map_side, map_side));
    let mut mask = Array2::from_elem((map_side, map_side), false);
    let mut labels = Array2::from_elem((map_side, map_side), -1i8);
    for i in 0..map_side {
        for j in 0..map_side {
            let (cx, cy) = cell_center(i, j, stride);
            targets[[0, i, j]] = cx - gt.x_min;
            targets[[1, i, j]] = cy - gt.y_min;
            targets[[2, i, j]] = gt.x_max - cx;
            targets[[3, i, j]] = gt.y_max - cy;
            mask[[i, j]] = gt.contains_point(cx, cy);
            if shrunk.contains_point(cx, cy) {
                labels[[i, j]] = 1;
            }
        }
    }
    Ok(EncodedTargets {
        regression: RegressionTargets {
            targets,
            positive_mask: mask,
        },
        cls_labels: labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};

    #[test]
    fn triplet_values() {
        let t = array![0.0f64, 0.0];
        let at = |d: f64| array![d, 0.0];
        // e_T = e_S, d(T,N) = margin
        assert_eq!(triplet_loss(t.view(), t.view(), at(1.0).view(), 1.0), 0.0);
        assert_eq!(triplet_loss(t.view(), at(0.2).view(), at(1.5).view(), 1.0), 0.0);
        assert_eq!(triplet_loss(t.view(), at(1.0).view(), at(0.5).view(), 1.0), 1.5);
    }

    #[test]
    fn iou_values() {
        let t = array![[0.0f64, 0.0, 2.0, 2.0]];
        let p = array![[1.0f64, 0.0, 3.0, 2.0]];
        let l = iou_loss(&p, &t, &[true]);
        assert_relative_eq!(l.value, 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(iou_loss(&t, &t, &[true]).value, 0.0);
        let far = array![[10.0f64, 10.0, 12.0, 12.0]];
        assert_eq!(iou_loss(&far, &t, &[true]).value, 1.0);
        let empty = iou_loss(&p, &t, &[false]);
        assert!(empty.empty);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn focal_values() {
        let ln2 = 2f64.ln();
        let pos = focal_loss(array![0.0f64].view(), array![1i8].view(), 2.0);
        let neg = focal_loss(array![0.0f64].view(), array![-1i8].view(), 2.0);
        assert_relative_eq!(pos, 0.25 * ln2, epsilon = 1e-12);
        assert_relative_eq!(neg, 0.25 * ln2, epsilon = 1e-12);
        let sure = focal_loss(array![40.0f64].view(), array![1i8].view(), 2.0);
        assert!(sure < 1e-12);
    }

    #[test]
    fn focal_is_monotone_in_probability() {
        let logits = Array1::linspace(-6.0f64, 6.0, 49);
        let pos: Vec<f64> = logits
            .iter()
            .map(|&x| focal_loss(array![x].view(), array![1i8].view(), 2.0))
            .collect();
        let neg: Vec<f64> = logits
            .iter()
            .map(|&x| focal_loss(array![x].view(), array![-1i8].view(), 2.0))
            .collect();
        assert!(pos.windows(2).all(|w| w[1] < w[0]));
        assert!(neg.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn total_loss_weights() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &cfg), 2.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
        let no_triplet = LossConfig {
            lambda1: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(123.0, 0.5, 0.25, &no_triplet), 0.75);
    }

    #[test]
    fn encode_center_cell() {
        let gt = BBox::new(64.0, 64.0, 192.0, 192.0);
        let enc = encode_targets(&gt, 16, 16).unwrap();
        let t = &enc.regression.targets;
        assert_eq!(
            [t[[0, 8, 8]], t[[1, 8, 8]], t[[2, 8, 8]], t[[3, 8, 8]]],
            [72.0, 72.0, 56.0, 56.0]
        );
        assert!(enc.regression.positive_mask[[8, 8]]);
        assert_eq!(enc.cls_labels[[8, 8]], 1);
        assert_eq!(enc.cls_labels[[0, 0]], -1);
    }

    #[test]
    fn corner_cell_has_zero_distance() {
        // cell (2,2) center is (40,40)
        let gt = BBox::new(40.0, 40.0, 100.0, 90.0);
        let enc = encode_targets(&gt, 16, 16).unwrap();
        assert!(enc.regression.positive_mask[[2, 2]]);
        assert_eq!(enc.regression.targets[[0, 2, 2]], 0.0);
        assert_eq!(enc.regression.targets[[1, 2, 2]], 0.0);
    }

    #[test]
    fn encode_rejects_out_of_crop() {
        let gt = BBox::new(-5.0, 10.0, 50.0, 60.0);
        assert!(matches!(
            encode_targets(&gt, 16, 16),
            Err(FearError::BoxOutOfBounds(_))
        ));
    }

    #[test]
    fn config_validation_names_field() {
        let bad = LossConfig {
            gamma: -1.0,
            ..LossConfig::default()
        };
        assert!(matches!(bad.validate(), Err(FearError::InvalidConfig { field, .. }) if field == "gamma"));
    }
}
