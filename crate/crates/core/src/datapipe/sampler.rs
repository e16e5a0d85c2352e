use rand::Rng;

use super::crop::{crop_search, crop_template};
use super::synth::SyntheticVideo;
use super::{SamplerConfig, TrainingSample};
use crate::error::{FearError, Result};
use crate::geometry::BBox;

/// Maximum template/search frame distance at `epoch` (epochs count from 1).
pub fn curriculum_distance(epoch: usize, cfg: &SamplerConfig) -> usize {
    let grown = (epoch + 1).saturating_sub(cfg.curriculum_start_epoch);
    cfg.base_distance + cfg.curriculum_step * grown
}

/// Where each crop of a [`TrainingSample`] came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub distance: usize,
    pub template_frame: usize,
    pub search_frame: usize,
    pub dynamic_frame: usize,
    /// Frame-space square covered by the dynamic template crop.
    pub dynamic_region: BBox,
    /// Frame-space square covered by the negative crop.
    pub negative_region: BBox,
    /// True when the negative crop was taken from the dynamic template's frame.
    pub negative_same_frame: bool,
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub sample: TrainingSample,
    pub meta: SampleMeta,
}

fn region(center: (f64, f64), side: f64) -> BBox {
    BBox::from_center_size(center.0, center.1, side, side)
}

/// Side of the square template region for `b`.
fn template_side(b: &BBox, cfg: &SamplerConfig) -> f64 {
    let grow = 1.0 + 2.0 * cfg.context_offset;
    (b.width() * grow).max(b.height() * grow)
}

const NEGATIVE_GRID: usize = 16;

/// Candidate negative-crop centers inside the frame whose search-sized region
/// does not touch `avoid`.
fn free_centers(w: f64, h: f64, side: f64, avoid: &BBox) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for gy in 0..NEGATIVE_GRID {
        for gx in 0..NEGATIVE_GRID {
            let c = (
                (gx as f64 + 0.5) * w / NEGATIVE_GRID as f64,
                (gy as f64 + 0.5) * h / NEGATIVE_GRID as f64,
            );
            if region(c, side).intersection_area(avoid) <= 0.0 {
                out.push(c);
            }
        }
    }
    out
}

/// Draws a training pair from `video`.
///
/// The template frame is uniform over the video, the search frame lies within
/// `curriculum_distance(epoch)` of it (clamped to the video) and the dynamic
/// template frame lies between them. The negative crop comes from the dynamic
/// template's frame at a position that shares no pixels with the dynamic
/// template region; when no such position exists it is taken from
/// `negative_source` instead. A single-frame video yields template and search
/// from the same frame.
pub fn sample_pair<R: Rng + ?Sized>(
    video: &SyntheticVideo,
    negative_source: Option<&SyntheticVideo>,
    epoch: usize,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<PairSample> {
    let n = video.len();
    if n == 0 || video.boxes.len() != n {
        return Err(FearError::LengthMismatch(format!(
            "video has {n} frames and {} boxes",
            video.boxes.len()
        )));
    }
    let d = curriculum_distance(epoch, cfg);
    let t = rng.random_range(0..n);
    let s = rng.random_range(t.saturating_sub(d)..=(t + d).min(n - 1));
    let (lo, hi) = (t.min(s), t.max(s));
    let dyn_idx = if hi - lo >= 2 {
        rng.random_range(lo + 1..hi)
    } else {
        rng.random_range(lo..=hi)
    };

    let template = crop_template(video.frames[t].view(), &video.boxes[t], cfg)?;
    let search = crop_search(video.frames[s].view(), &video.boxes[s], cfg)?;
    let dyn_box = video.boxes[dyn_idx];
    let dynamic = crop_template(video.frames[dyn_idx].view(), &dyn_box, cfg)?;
    let dynamic_region = region(dyn_box.center(), template_side(&dyn_box, cfg));

    let (w, h) = video.size();
    let neg_side = 2.0 * template_side(&dyn_box, cfg);
    let candidates = free_centers(w as f64, h as f64, neg_side, &dynamic_region);
    let (neg_frame, neg_center, same_frame) = if !candidates.is_empty() {
        let c = candidates[rng.random_range(0..candidates.len())];
        (&video.frames[dyn_idx], c, true)
    } else {
        let other = negative_source.unwrap_or(video);
        let k = rng.random_range(0..other.len());
        let (ow, oh) = other.size();
        let c = (rng.random_range(0.0..=ow as f64), rng.random_range(0.0..=oh as f64));
        (&other.frames[k], c, false)
    };
    let neg_box = BBox::from_center_size(neg_center.0, neg_center.1, dyn_box.width(), dyn_box.height());
    let negative = crop_search(neg_frame.view(), &neg_box, cfg)?;
    let negative_region = region(neg_center, neg_side);

    let side = cfg.search_size as f64;
    let gt_box = search
        .transform
        .box_to_crop(&video.boxes[s])
        .clamp_to(side, side);
    Ok(PairSample {
        sample: TrainingSample {
            template_img: template.image,
            search_img: search.image,
            dynamic_img: dynamic.image,
            negative_img: negative.image,
            gt_box,
        },
        meta: SampleMeta {
            distance: d,
            template_frame: t,
            search_frame: s,
            dynamic_frame: dyn_idx,
            dynamic_region,
            negative_region,
            negative_same_frame: same_frame,
        },
    })
}
