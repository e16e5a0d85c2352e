//! Dual-template representation and the dynamic-template update rule.
//!
//! The template used for matching is the convex mix
//! `(1 - w) * F_static + w * F_dynamic` with `w = sigmoid(raw_mix)`, the only
//! learnable parameter of the mechanism. During tracking, every
//! `update_interval` frames the dynamic features are re-extracted from the
//! frame whose search embedding was most similar to the mixed template.

use ndarray::{Array, Array1, Array2, Array3, Array4, ArrayView2, Axis, Dimension, Zip};

use crate::error::{FearError, Result};
use crate::float::{sigmoid, Float};
use crate::geometry::BBox;
use crate::model::FeatureMap;

/// Epsilon guarding pooled-weight sums and vector norms.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub vector: Array1<T>,
}

impl<T: Float> Embedding<T> {
    pub fn new(vector: Array1<T>) -> Self {
        Embedding { vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Elementwise `(1 - w) * a + w * b`.
pub fn combine_features<T: Float, D: Dimension>(
    static_feats: &Array<T, D>,
    dynamic_feats: &Array<T, D>,
    w: T,
) -> Array<T, D> {
    let mut out = static_feats.clone();
    Zip::from(&mut out)
        .and(dynamic_feats)
        .for_each(|o, &d| *o = (T::one() - w) * *o + w * d);
    out
}

/// Gradients of the mix w.r.t. both inputs and the raw (pre-sigmoid) scalar.
pub fn combine_backward<T: Float, D: Dimension>(
    d_out: &Array<T, D>,
    static_feats: &Array<T, D>,
    dynamic_feats: &Array<T, D>,
    raw_mix: T,
) -> (Array<T, D>, Array<T, D>, T) {
    let w = sigmoid(raw_mix);
    let d_static = d_out.mapv(|g| g * (T::one() - w));
    let d_dynamic = d_out.mapv(|g| g * w);
    let dw = Zip::from(d_out)
        .and(static_feats)
        .and(dynamic_feats)
        .fold(T::zero(), |acc, &g, &s, &d| acc + g * (d - s));
    (d_static, d_dynamic, dw * w * (T::one() - w))
}

/// Plain spatial mean per channel of the mixed template.
pub fn embed_template<T: Float>(combined: &FeatureMap<T>) -> Embedding<T> {
    let (c, h, w) = combined.data.dim();
    let flat = combined
        .data
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous");
    Embedding::new(flat.sum_axis(Axis(1)) / T::c((h * w) as f64))
}

/// Weighted average pooling of search features by confidence scores in (0,1):
/// `e[c] = Σ s_ij F[c,i,j] / Σ s_ij`.
pub fn embed_search<T: Float>(
    search: &FeatureMap<T>,
    scores: ArrayView2<'_, T>,
) -> Result<Embedding<T>> {
    let (c, h, w) = search.data.dim();
    if scores.dim() != (h, w) {
        return Err(FearError::ShapeMismatch {
            expected: vec![h, w],
            actual: scores.shape().to_vec(),
        });
    }
    let total = scores.sum() + T::c(EPS);
    let mut e = Array1::zeros(c);
    for (ch, plane) in search.data.outer_iter().enumerate() {
        e[ch] = Zip::from(&plane)
            .and(&scores)
            .fold(T::zero(), |acc, &f, &s| acc + f * s)
            / total;
    }
    Ok(Embedding::new(e))
}

pub fn cosine_similarity<T: Float>(a: &Embedding<T>, b: &Embedding<T>) -> T {
    let dot = a.vector.dot(&b.vector);
    let na = a.vector.dot(&a.vector).sqrt();
    let nb = b.vector.dot(&b.vector).sqrt();
    let denom = (na * nb).max(T::c(EPS));
    (dot / denom).max(-T::one()).min(T::one())
}

/// `N x C` spatial means of an `N x C x H x W` batch.
pub fn mean_pool_batch<T: Float>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / T::c((h * w) as f64)
}

pub fn mean_pool_backward<T: Float>(d: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = d.dim();
    let scale = T::c((h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| d[[b, ch]] / scale)
}

/// Batched weighted pooling; `weights` is `N x H x W`.
pub fn weighted_pool_batch<T: Float>(x: &Array4<T>, weights: &Array3<T>) -> Array2<T> {
    let (n, c, _, _) = x.dim();
    let mut out = Array2::zeros((n, c));
    for b in 0..n {
        let wb = weights.index_axis(Axis(0), b);
        let total = wb.sum() + T::c(EPS);
        for ch in 0..c {
            out[[b, ch]] = Zip::from(&x.slice(ndarray::s![b, ch, .., ..]))
                .and(&wb)
                .fold(T::zero(), |acc, &f, &s| acc + f * s)
                / total;
        }
    }
    out
}

/// Gradient of [`weighted_pool_batch`] w.r.t. the features; the weights are
/// treated as constants.
pub fn weighted_pool_backward<T: Float>(d: &Array2<T>, weights: &Array3<T>) -> Array4<T> {
    let (n, c) = d.dim();
    let (_, h, w) = weights.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for b in 0..n {
        let wb = weights.index_axis(Axis(0), b);
        let total = wb.sum() + T::c(EPS);
        for ch in 0..c {
            let g = d[[b, ch]] / total;
            Zip::from(&mut out.slice_mut(ndarray::s![b, ch, .., ..]))
                .and(&wb)
                .for_each(|o, &s| *o = g * s);
        }
    }
    out
}

/// Frame buffered as the next dynamic template.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub similarity: f64,
    /// Template-style crop around the predicted box, `H x W x 3`.
    pub crop: Array3<f32>,
    pub bbox: BBox,
    pub frame_index: usize,
}

#[derive(Debug, Clone)]
pub struct DualTemplateState<T> {
    pub static_feats: FeatureMap<T>,
    pub dynamic_feats: FeatureMap<T>,
    /// `None` when the network was built without the mixing parameter.
    pub raw_mix: Option<T>,
    pub best_candidate: Option<Candidate>,
    pub frames_since_update: usize,
    pub update_interval: usize,
    /// Candidates below this similarity are ignored. Off by default.
    pub similarity_threshold: Option<f64>,
    pub updates_performed: usize,
}

impl<T: Float> DualTemplateState<T> {
    /// Starts with the dynamic template equal to the static one.
    pub fn new(static_feats: FeatureMap<T>, raw_mix: Option<T>, update_interval: usize) -> Self {
        DualTemplateState {
            dynamic_feats: static_feats.clone(),
            static_feats,
            raw_mix,
            best_candidate: None,
            frames_since_update: 0,
            update_interval: update_interval.max(1),
            similarity_threshold: None,
            updates_performed: 0,
        }
    }

    pub fn mix_weight(&self) -> T {
        self.raw_mix.map(sigmoid).unwrap_or_else(T::zero)
    }

    pub fn combine_templates(&self) -> Result<FeatureMap<T>> {
        if self.static_feats.data.dim() != self.dynamic_feats.data.dim() {
            return Err(FearError::ShapeMismatch {
                expected: self.static_feats.data.shape().to_vec(),
                actual: self.dynamic_feats.data.shape().to_vec(),
            });
        }
        FeatureMap::new(
            combine_features(
                &self.static_feats.data,
                &self.dynamic_feats.data,
                self.mix_weight(),
            ),
            self.static_feats.stride,
        )
    }

    /// Counts a frame toward the update window without offering a candidate
    /// (used for the initialization frame).
    pub fn observe_unscored_frame(&mut self) {
        self.frames_since_update += 1;
        if self.frames_since_update >= self.update_interval {
            self.frames_since_update = 0;
            self.best_candidate = None;
        }
    }

    /// Records one tracked frame. The candidate is replaced only on a strictly
    /// higher similarity, so ties keep the earliest frame. When the window
    /// closes the dynamic features are rebuilt from the buffered crop with
    /// `extract`; returns whether that happened.
    pub fn observe_frame<C, E>(
        &mut self,
        similarity: f64,
        frame_index: usize,
        predicted_box: BBox,
        make_crop: C,
        extract: E,
    ) -> Result<bool>
    where
        C: FnOnce() -> Result<Array3<f32>>,
        E: FnOnce(&Array3<f32>) -> Result<FeatureMap<T>>,
    {
        let passes = self.similarity_threshold.is_none_or(|t| similarity >= t);
        let better = self
            .best_candidate
            .as_ref()
            .is_none_or(|c| similarity > c.similarity);
        if passes && better {
            self.best_candidate = Some(Candidate {
                similarity,
                crop: make_crop()?,
                bbox: predicted_box,
                frame_index,
            });
        }
        self.frames_since_update += 1;
        if self.frames_since_update < self.update_interval {
            return Ok(false);
        }
        self.frames_since_update = 0;
        match self.best_candidate.take() {
            Some(c) => {
                self.dynamic_feats = extract(&c.crop)?;
                self.updates_performed += 1;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}
