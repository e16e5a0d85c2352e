use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::hsv_to_rgb;
use super::Frame;
use crate::geometry::BBox;

/// Appearance-change parameters of a synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    /// Hue change of the target per frame, in turns.
    pub hue_rate: f64,
    /// Relative amplitude of the target's size oscillation.
    pub scale_amplitude: f64,
    /// Maximum target speed in pixels per frame.
    pub max_speed: f64,
    /// Whether an occluder sweeps across the target once.
    pub occluder: bool,
}

impl DriftProfile {
    pub fn none() -> Self {
        DriftProfile {
            hue_rate: 0.0,
            scale_amplitude: 0.0,
            max_speed: 0.0,
            occluder: false,
        }
    }

    pub fn mild() -> Self {
        DriftProfile {
            hue_rate: 0.0008,
            scale_amplitude: 0.1,
            max_speed: 1.5,
            occluder: false,
        }
    }

    pub fn strong() -> Self {
        DriftProfile {
            hue_rate: 0.003,
            scale_amplitude: 0.25,
            max_speed: 3.0,
            occluder: true,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::none()),
            "mild" => Some(Self::mild()),
            "strong" => Some(Self::strong()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
    pub seed: u64,
    pub drift: DriftProfile,
    /// Occluder rectangle per frame, when one is visible.
    pub occluders: Vec<Option<BBox>>,
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the frames.
    pub fn size(&self) -> (usize, usize) {
        self.frames
            .first()
            .map(|f| (f.dim().1, f.dim().0))
            .unwrap_or((0, 0))
    }

    /// Largest IoU between the target box and the occluder over the video.
    pub fn max_occlusion_iou(&self) -> f64 {
        self.boxes
            .iter()
            .zip(&self.occluders)
            .filter_map(|(b, o)| o.map(|o| b.iou(&o)))
            .fold(0.0, f64::max)
    }
}

const MIN_HALF: f64 = 14.0;
const MAX_HALF: f64 = 26.0;
const MARGIN: f64 = 4.0;

fn background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Array3<f32> {
    // a few low-frequency gratings plus per-pixel grain
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let fx = rng.random_range(-0.08..0.08);
            let fy = rng.random_range(-0.08..0.08);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = [
                rng.random_range(0.02..0.08),
                rng.random_range(0.02..0.08),
                rng.random_range(0.02..0.08),
            ];
            (fx, fy, phase, amp)
        })
        .collect();
    let base: [f64; 3] = [
        rng.random_range(0.3..0.55),
        rng.random_range(0.3..0.55),
        rng.random_range(0.3..0.55),
    ];
    let mut bg = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let grain: f64 = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                let mut v = base[c] + grain;
                for (fx, fy, phase, amp) in &waves {
                    v += amp[c] * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                bg[[y, x, c]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    bg
}

/// Renders the target, an ellipse with a darker inner ring, and returns its
/// tight box.
fn draw_target(img: &mut Array3<f32>, cx: f64, cy: f64, a: f64, b: f64, rgb: (f32, f32, f32)) -> BBox {
    let (h, w, _) = img.dim();
    let x0 = (cx - a).floor().max(0.0) as usize;
    let x1 = ((cx + a).ceil() as usize).min(w);
    let y0 = (cy - b).floor().max(0.0) as usize;
    let y1 = ((cy + b).ceil() as usize).min(h);
    let (mut bx0, mut by0, mut bx1, mut by1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for y in y0..y1 {
        for x in x0..x1 {
            let px = (x as f64 + 0.5 - cx) / a;
            let py = (y as f64 + 0.5 - cy) / b;
            let r2 = px * px + py * py;
            if r2 > 1.0 {
                continue;
            }
            let shade = if (0.3..0.5).contains(&r2) { 0.45 } else { 1.0 };
            img[[y, x, 0]] = rgb.0 * shade;
            img[[y, x, 1]] = rgb.1 * shade;
            img[[y, x, 2]] = rgb.2 * shade;
            bx0 = bx0.min(x as f64);
            by0 = by0.min(y as f64);
            bx1 = bx1.max(x as f64 + 1.0);
            by1 = by1.max(y as f64 + 1.0);
        }
    }
    BBox::new(bx0, by0, bx1, by1)
}

fn fill_rect(img: &mut Array3<f32>, r: &BBox, value: f32) {
    let (h, w, _) = img.dim();
    let r = r.clamp_to(w as f64, h as f64);
    for y in r.y_min.round() as usize..r.y_max.round() as usize {
        for x in r.x_min.round() as usize..r.x_max.round() as usize {
            for c in 0..3 {
                img[[y, x, c]] = value;
            }
        }
    }
}

/// Deterministic synthetic video: a textured static background with one
/// moving elliptical target whose hue and size drift according to `drift`.
/// Frames are `size.1 x size.0` (height x width).
pub fn generate_synthetic(seed: u64, n_frames: usize, size: (usize, usize), drift: DriftProfile) -> SyntheticVideo {
    let (w, h) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, w, h);
    let half_w = rng.random_range(MIN_HALF..MAX_HALF);
    let half_h = (half_w * rng.random_range(0.7..1.3)).clamp(MIN_HALF, MAX_HALF);
    let hue0 = rng.random_range(0.0..1.0f64);
    let saturation = rng.random_range(0.75..1.0f32);
    let reach = MAX_HALF * (1.0 + drift.scale_amplitude) + MARGIN;
    let (x_lo, x_hi) = (reach, (w as f64 - reach).max(reach));
    let (y_lo, y_hi) = (reach, (h as f64 - reach).max(reach));
    let mut cx = rng.random_range(x_lo..=x_hi);
    let mut cy = rng.random_range(y_lo..=y_hi);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = drift.max_speed * rng.random_range(0.5..=1.0);
    let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
    let scale_period = rng.random_range(80.0..160.0);
    let scale_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let occluder_start = if drift.occluder && n_frames > 2 {
        Some(n_frames / 3 + rng.random_range(0..=n_frames / 3))
    } else {
        None
    };

    let mut frames = Vec::with_capacity(n_frames);
    let mut boxes = Vec::with_capacity(n_frames);
    let mut occluders = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        if k > 0 {
            // small heading wobble, bounce off the margins
            let turn: f64 = rng.random_range(-0.05..0.05);
            let (s, c) = turn.sin_cos();
            (vx, vy) = (vx * c - vy * s, vx * s + vy * c);
            cx += vx;
            cy += vy;
            if cx < x_lo || cx > x_hi {
                vx = -vx;
                cx = cx.clamp(x_lo, x_hi);
            }
            if cy < y_lo || cy > y_hi {
                vy = -vy;
                cy = cy.clamp(y_lo, y_hi);
            }
        }
        let s = 1.0 + drift.scale_amplitude * (std::f64::consts::TAU * k as f64 / scale_period + scale_phase).sin();
        let hue = (hue0 + drift.hue_rate * k as f64) as f32;
        let rgb = hsv_to_rgb(hue, saturation, 0.95);
        let mut img = bg.clone();
        let bbox = draw_target(&mut img, cx, cy, half_w * s, half_h * s, rgb);
        // the occluder has the target's size and sweeps left to right at the
        // target's height
        let occ = occluder_start.and_then(|start| {
            let sweep = 6.0;
            let t = k as f64 - start as f64;
            let ox = -bbox.width() + t * sweep;
            if t < 0.0 || ox > w as f64 {
                return None;
            }
            let (_, ty) = bbox.center();
            Some(BBox::from_center_size(ox, ty, bbox.width(), bbox.height()))
        });
        if let Some(o) = occ {
            fill_rect(&mut img, &o, 0.15);
        }
        frames.push(img.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        boxes.push(bbox);
        occluders.push(occ.filter(|o| o.intersection_area(&BBox::new(0.0, 0.0, w as f64, h as f64)) > 0.0));
    }
    SyntheticVideo {
        frames,
        boxes,
        seed,
        drift,
        occluders,
    }
}
