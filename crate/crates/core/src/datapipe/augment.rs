use ndarray::Array3;
use rand::Rng;

use super::{SamplerConfig, TrainingSample};
use crate::geometry::BBox;

/// Fraction of the mean box extent a shift may move the box center by, so the
/// augmented box always keeps overlapping its original position.
const MAX_CENTER_SHIFT: f64 = 0.45;

/// Scales `img` by `scale` about its center and then translates it by
/// `(dx, dy)` pixels. Uncovered pixels take the image's mean color.
pub fn warp(img: &Array3<f32>, scale: f64, dx: f64, dy: f64) -> Array3<f32> {
    let (h, w, _) = img.dim();
    if scale == 1.0 && dx == 0.0 && dy == 0.0 {
        return img.clone();
    }
    let mean = channel_mean(img);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Array3::zeros((h, w, 3));
    for v in 0..h {
        for u in 0..w {
            let sx = (u as f64 + 0.5 - cx - dx) / scale + cx - 0.5;
            let sy = (v as f64 + 0.5 - cy - dy) / scale + cy - 0.5;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                for c in 0..3 {
                    out[[v, u, c]] = mean[c];
                }
                continue;
            }
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
                let bot = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
                out[[v, u, c]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Maps a box through the same transform as [`warp`] on a `side x side` image.
fn warp_box(b: &BBox, side: f64, scale: f64, dx: f64, dy: f64) -> BBox {
    let c = side / 2.0;
    let f = |v: f64, d: f64| scale * (v - c) + c + d;
    BBox::new(f(b.x_min, dx), f(b.y_min, dy), f(b.x_max, dx), f(b.y_max, dy))
}

fn channel_mean(img: &Array3<f32>) -> [f32; 3] {
    let n = (img.dim().0 * img.dim().1).max(1) as f64;
    let mut m = [0f64; 3];
    for ((_, _, c), v) in img.indexed_iter() {
        m[c] += *v as f64;
    }
    m.map(|v| (v / n) as f32)
}

pub(crate) fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Random brightness, contrast and hue jitter, each applied independently with
/// probability `photometric_prob`. Output stays in `[0, 1]`.
pub fn photometric<R: Rng + ?Sized>(img: &mut Array3<f32>, rng: &mut R, cfg: &SamplerConfig) {
    let draw = |mag: f64, rng: &mut R| -> Option<f32> {
        if mag <= 0.0 || cfg.photometric_prob <= 0.0 {
            return None;
        }
        let apply = rng.random::<f64>() < cfg.photometric_prob;
        let v = rng.random_range(-mag..=mag) as f32;
        apply.then_some(v)
    };
    let brightness = draw(cfg.brightness, rng);
    let contrast = draw(cfg.contrast, rng);
    let hue = draw(cfg.hue, rng);
    if let Some(b) = brightness {
        img.mapv_inplace(|v| v * (1.0 + b));
    }
    if let Some(c) = contrast {
        let mean = img.mean().unwrap_or(0.0);
        img.mapv_inplace(|v| (v - mean) * (1.0 + c) + mean);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    if let Some(dh) = hue {
        let (h, w, _) = img.dim();
        for y in 0..h {
            for x in 0..w {
                let (hh, s, v) = rgb_to_hsv(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
                let (r, g, b) = hsv_to_rgb(hh + dh, s, v);
                img[[y, x, 0]] = r;
                img[[y, x, 1]] = g;
                img[[y, x, 2]] = b;
            }
        }
    }
}

struct Jitter {
    scale: f64,
    dx: f64,
    dy: f64,
}

fn draw_jitter<R: Rng + ?Sized>(rng: &mut R, shift: f64, lo: f64, hi: f64) -> Jitter {
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (dx, dy) = if shift > 0.0 {
        (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift))
    } else {
        (0.0, 0.0)
    };
    Jitter { scale, dx, dy }
}

/// Geometric jitter for every crop plus photometric jitter. The template and
/// dynamic template get the light shift/scale, the search and negative crops
/// the severe one; `gt_box` follows the search warp.
pub fn augment<R: Rng + ?Sized>(
    sample: TrainingSample,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> TrainingSample {
    let t_lo = 1.0 - cfg.template_scale_range;
    let t_hi = 1.0 + cfg.template_scale_range;
    let light = |img: &Array3<f32>, rng: &mut R| {
        let j = draw_jitter(rng, cfg.template_shift, t_lo, t_hi);
        warp(img, j.scale, j.dx, j.dy)
    };
    let mut template_img = light(&sample.template_img, rng);
    let mut dynamic_img = light(&sample.dynamic_img, rng);

    let side = sample.search_img.dim().0 as f64;
    let j = draw_jitter(rng, cfg.search_shift, cfg.search_scale_min, cfg.search_scale_max);
    let gt = &sample.gt_box;
    let scaled = warp_box(gt, side, j.scale, 0.0, 0.0);
    // cap the shift so the moved box still overlaps the original one
    let (ocx, ocy) = gt.center();
    let (scx, scy) = scaled.center();
    let cap = |base: f64, d: f64, extent: f64| {
        let limit = MAX_CENTER_SHIFT * extent;
        (base + d).clamp(-limit, limit) - base
    };
    let dx = cap(scx - ocx, j.dx, gt.width() + scaled.width());
    let dy = cap(scy - ocy, j.dy, gt.height() + scaled.height());
    let mut search_img = warp(&sample.search_img, j.scale, dx, dy);
    let gt_box = warp_box(gt, side, j.scale, dx, dy)
        .clamp_to(side, side);

    let n = draw_jitter(rng, cfg.search_shift, cfg.search_scale_min, cfg.search_scale_max);
    let mut negative_img = warp(&sample.negative_img, n.scale, n.dx, n.dy);

    for img in [
        &mut template_img,
        &mut dynamic_img,
        &mut search_img,
        &mut negative_img,
    ] {
        photometric(img, rng, cfg);
    }
    TrainingSample {
        template_img,
        search_img,
        dynamic_img,
        negative_img,
        gt_box,
    }
}
