//! Crops, augmentation, curriculum pair sampling and the synthetic video
//! generator that stands in for real tracking corpora.

mod augment;
mod crop;
mod io;
mod sampler;
mod synth;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use augment::{augment, photometric, warp};
pub use crop::{crop_search, crop_template, frame_to_float, Crop};
pub use io::{load_video, read_annotations, save_video, ANNOTATION_FILE};
pub use sampler::{curriculum_distance, sample_pair, PairSample, SampleMeta};
pub use synth::{generate_synthetic, DriftProfile, SyntheticVideo};

use crate::error::{FearError, Result};
use crate::geometry::BBox;

/// 8-bit `H x W x 3` video frame.
pub type Frame = Array3<u8>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Frame distance between template and search frames before the curriculum.
    pub base_distance: usize,
    pub curriculum_start_epoch: usize,
    /// Frames added to the distance per epoch once the curriculum starts.
    pub curriculum_step: usize,
    pub template_shift: f64,
    /// Template scale jitter, as a fraction on both sides.
    pub template_scale_range: f64,
    pub search_shift: f64,
    pub search_scale_min: f64,
    pub search_scale_max: f64,
    /// Context added on every side of the box, as a fraction of its size.
    pub context_offset: f64,
    pub template_size: usize,
    pub search_size: usize,
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
    pub photometric_prob: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            base_distance: 70,
            curriculum_start_epoch: 15,
            curriculum_step: 2,
            template_shift: 8.0,
            template_scale_range: 0.05,
            search_shift: 48.0,
            search_scale_min: 0.65,
            search_scale_max: 1.35,
            context_offset: 0.2,
            template_size: 128,
            search_size: 256,
            brightness: 0.2,
            contrast: 0.2,
            hue: 0.05,
            photometric_prob: 0.5,
        }
    }
}

impl SamplerConfig {
    /// All augmentation magnitudes set to zero.
    pub fn without_augmentation() -> Self {
        SamplerConfig {
            template_shift: 0.0,
            template_scale_range: 0.0,
            search_shift: 0.0,
            search_scale_min: 1.0,
            search_scale_max: 1.0,
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            photometric_prob: 0.0,
            ..SamplerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_distance < 1 {
            return Err(FearError::config("base_distance", "must be at least 1"));
        }
        for (name, v) in [
            ("template_shift", self.template_shift),
            ("template_scale_range", self.template_scale_range),
            ("search_shift", self.search_shift),
            ("context_offset", self.context_offset),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FearError::config(name, "must be a non-negative number"));
            }
        }
        if !(self.search_scale_min > 0.0 && self.search_scale_min <= self.search_scale_max) {
            return Err(FearError::config(
                "search_scale_min",
                "must be positive and not above search_scale_max",
            ));
        }
        if self.template_scale_range >= 1.0 {
            return Err(FearError::config("template_scale_range", "must be below 1"));
        }
        if !(0.0..=1.0).contains(&self.photometric_prob) {
            return Err(FearError::config("photometric_prob", "must be in [0, 1]"));
        }
        if self.template_size == 0 || self.search_size != 2 * self.template_size {
            return Err(FearError::config(
                "search_size",
                "must equal twice a positive template_size",
            ));
        }
        Ok(())
    }
}

/// One training example. Images are `H x W x 3` floats in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub template_img: Array3<f32>,
    pub search_img: Array3<f32>,
    pub dynamic_img: Array3<f32>,
    pub negative_img: Array3<f32>,
    /// Target box in search-crop pixels.
    pub gt_box: BBox,
}
