//! Online tracking: session setup, per-frame localization and dynamic
//! template bookkeeping.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::datapipe::{crop_search, crop_template, SamplerConfig};
use crate::error::{FearError, Result};
use crate::float::{sigmoid, Float};
use crate::geometry::BBox;
use crate::model::{reduce_template, ModelConfig, Network};
use crate::template_policy::{cosine_similarity, embed_search, embed_template, DualTemplateState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Frames per dynamic-template update window.
    pub update_interval: usize,
    pub window_influence: f64,
    /// Smoothing rate for the box size; the center always follows the prediction.
    pub size_lr: f64,
    pub use_window: bool,
    /// Frames whose similarity falls below this are never used as templates.
    pub similarity_threshold: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            update_interval: 70,
            window_influence: 0.25,
            size_lr: 0.35,
            use_window: true,
            similarity_threshold: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 {
            return Err(FearError::config("update_interval", "must be at least 1"));
        }
        for (name, v) in [
            ("window_influence", self.window_influence),
            ("size_lr", self.size_lr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FearError::config(name, "must be in [0, 1]"));
            }
        }
        if let Some(t) = self.similarity_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(FearError::config("similarity_threshold", "must be in [-1, 1]"));
            }
        }
        Ok(())
    }
}

/// Per-frame tracking result in frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerOutput {
    pub frame_index: usize,
    pub bbox: BBox,
    /// Unpenalized classification probability at the selected cell.
    pub confidence: f64,
    /// Cosine similarity between the template and search embeddings.
    pub similarity: f64,
    /// Whether the dynamic template was replaced after this frame.
    pub template_updated: bool,
}

/// Crop geometry used by the tracker for a given model.
pub fn crop_config(model: &ModelConfig) -> SamplerConfig {
    SamplerConfig {
        template_size: model.template_size,
        search_size: model.search_size,
        ..SamplerConfig::default()
    }
}

/// Outer product of two symmetric Hann windows of length `n`.
pub fn hanning2d(n: usize) -> Array2<f64> {
    let hann: Vec<f64> = if n == 1 {
        vec![1.0]
    } else {
        (0..n)
            .map(|k| 0.5 - 0.5 * (std::f64::consts::TAU * k as f64 / (n - 1) as f64).cos())
            .collect()
    };
    Array2::from_shape_fn((n, n), |(i, j)| hann[i] * hann[j])
}

/// Box predicted at map cell `(row, col)`: side distances are `exp(raw) * stride`
/// from the cell center, and the result is clamped to a `crop_side` square.
pub fn decode_regression<T: Float>(
    reg: ArrayView3<'_, T>,
    cell: (usize, usize),
    stride: usize,
    crop_side: f64,
) -> BBox {
    let (i, j) = cell;
    let s = stride as f64;
    let (cx, cy) = crate::losses::cell_center(i, j, stride);
    let d = |k: usize| reg[[k, i, j]].f64().exp() * s;
    BBox::new(cx - d(0), cy - d(1), cx + d(2), cy + d(3)).clamp_to(crop_side, crop_side)
}

/// Index of the largest value; ties go to the lowest flat index.
pub fn argmax_first(scores: &Array2<f64>) -> (usize, usize) {
    let cols = scores.ncols();
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &v) in scores.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    (best / cols, best % cols)
}

/// Clamps `b` into the frame while keeping at least one pixel of extent.
fn fit_in_frame(b: &BBox, w: f64, h: f64) -> BBox {
    let (cx, cy) = b.center();
    let cx = cx.clamp(0.5, w - 0.5);
    let cy = cy.clamp(0.5, h - 0.5);
    let bw = b.width().clamp(1.0, w);
    let bh = b.height().clamp(1.0, h);
    let x0 = (cx - bw / 2.0).clamp(0.0, w - bw);
    let y0 = (cy - bh / 2.0).clamp(0.0, h - bh);
    BBox::new(x0, y0, x0 + bw, y0 + bh)
}

pub struct TrackSession<'a, T> {
    net: &'a Network<T>,
    pub config: TrackerConfig,
    crop: SamplerConfig,
    pub state: DualTemplateState<T>,
    pub last_box: BBox,
    pub frame_index: usize,
    window: Array2<f64>,
}

impl<'a, T: Float> TrackSession<'a, T> {
    /// Extracts the static template from `frame` around `bbox`. A box reaching
    /// past the frame is clamped to it first.
    pub fn init(
        net: &'a Network<T>,
        frame: ArrayView3<'_, u8>,
        bbox: BBox,
        config: TrackerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (h, w, _) = frame.dim();
        if !bbox.is_finite() {
            return Err(FearError::DegenerateBox(format!("{bbox:?}")));
        }
        let clamped = bbox.clamp_to(w as f64, h as f64);
        if !clamped.has_positive_area() {
            return Err(FearError::DegenerateBox(format!(
                "{bbox:?} has no area inside a {w}x{h} frame"
            )));
        }
        let crop = crop_config(net.config());
        let template = crop_template(frame, &clamped, &crop)?;
        let feats = net.extract_features(&template.image)?;
        let mut state = DualTemplateState::new(feats, net.raw_mix(), config.update_interval);
        state.similarity_threshold = config.similarity_threshold;
        state.observe_unscored_frame();
        let window = hanning2d(net.config().map_side());
        Ok(TrackSession {
            net,
            config,
            crop,
            state,
            last_box: clamped,
            frame_index: 0,
            window,
        })
    }

    pub fn updates_performed(&self) -> usize {
        self.state.updates_performed
    }

    pub fn step(&mut self, frame: ArrayView3<'_, u8>) -> Result<TrackerOutput> {
        let (h, w, _) = frame.dim();
        let net = self.net;
        let mc = net.config();
        let search = crop_search(frame, &self.last_box, &self.crop)?;
        let search_feats = net.extract_features(&search.image)?;
        let combined = self.state.combine_templates()?;
        let reduced = reduce_template(&combined, mc.template_corr_cells)?;
        let fused = net.fusion_block(&search_feats, &reduced)?;
        let heads = net.run_heads(&fused)?;
        let probs = heads.cls.index_axis(ndarray::Axis(0), 0).mapv(sigmoid);
        let scores = probs.mapv(|v| v.f64());
        let penalized = if self.config.use_window {
            let wi = self.config.window_influence;
            &scores * (1.0 - wi) + &self.window * wi
        } else {
            scores.clone()
        };
        let cell = argmax_first(&penalized);
        let crop_box = decode_regression(heads.reg.view(), cell, mc.final_stride, mc.search_size as f64);
        let pred = search.transform.box_to_frame(&crop_box);

        let lr = self.config.size_lr;
        let (pcx, pcy) = pred.center();
        let bw = lr * pred.width() + (1.0 - lr) * self.last_box.width();
        let bh = lr * pred.height() + (1.0 - lr) * self.last_box.height();
        let new_box = fit_in_frame(&BBox::from_center_size(pcx, pcy, bw, bh), w as f64, h as f64);

        let e_t = embed_template(&combined);
        let e_s = embed_search(&search_feats, probs.view())?;
        let similarity = cosine_similarity(&e_t, &e_s).f64();

        self.frame_index += 1;
        let crop = &self.crop;
        let updated = self.state.observe_frame(
            similarity,
            self.frame_index,
            new_box,
            || Ok(crop_template(frame, &new_box, crop)?.image),
            |img| net.extract_features(img),
        )?;
        self.last_box = new_box;
        Ok(TrackerOutput {
            frame_index: self.frame_index,
            bbox: new_box,
            confidence: scores[cell],
            similarity,
            template_updated: updated,
        })
    }
}

/// Tracks a whole sequence. The first output is the initialization frame with
/// the given box and confidence and similarity of 1.
pub fn track_sequence<T: Float, F: std::borrow::Borrow<crate::datapipe::Frame>>(
    net: &Network<T>,
    frames: &[F],
    init_box: BBox,
    config: &TrackerConfig,
) -> Result<(Vec<TrackerOutput>, usize)> {
    let first = frames
        .first()
        .ok_or_else(|| FearError::LengthMismatch("no frames to track".into()))?;
    let mut session = TrackSession::init(net, first.borrow().view(), init_box, config.clone())?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(TrackerOutput {
        frame_index: 0,
        bbox: session.last_box,
        confidence: 1.0,
        similarity: 1.0,
        template_updated: false,
    });
    for f in &frames[1..] {
        out.push(session.step(f.borrow().view())?);
    }
    Ok((out, session.updates_performed()))
}

/// One `frame_index x_min y_min x_max y_max confidence similarity` line per frame.
pub fn write_results(path: &Path, outputs: &[TrackerOutput]) -> Result<()> {
    let mut s = String::new();
    for o in outputs {
        let b = o.bbox;
        writeln!(
            s,
            "{} {} {} {} {} {} {}",
            o.frame_index, b.x_min, b.y_min, b.x_max, b.y_max, o.confidence, o.similarity
        )
        .expect("string write");
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<TrackerOutput>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FearError::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if v.len() != 7 {
            return Err(FearError::Parse(format!(
                "{}:{}: expected 7 columns, found {}",
                path.display(),
                n + 1,
                v.len()
            )));
        }
        out.push(TrackerOutput {
            frame_index: v[0] as usize,
            bbox: BBox::new(v[1], v[2], v[3], v[4]),
            confidence: v[5],
            similarity: v[6],
            template_updated: false,
        });
    }
    Ok(out)
}
