use ndarray::{Array3, ArrayView3};

use super::SamplerConfig;
use crate::error::{FearError, Result};
use crate::geometry::{BBox, CropTransform};

/// A resized square crop and the transform mapping its pixels back to the frame.
#[derive(Debug, Clone)]
pub struct Crop {
    pub image: Array3<f32>,
    pub transform: CropTransform,
}

pub fn frame_to_float(frame: ArrayView3<'_, u8>) -> Array3<f32> {
    frame.mapv(|v| v as f32 / 255.0)
}

/// Template crop: the box grown by `context_offset` on every side, padded to a
/// square with the mean color of the covered frame area, resized to
/// `template_size`.
pub fn crop_template(frame: ArrayView3<'_, u8>, bbox: &BBox, cfg: &SamplerConfig) -> Result<Crop> {
    let rect = context_rect(bbox, cfg)?;
    crop_square(frame, &rect, cfg.template_size)
}

/// Search crop: twice the template region (same center), same padding rule,
/// resized to `search_size`.
pub fn crop_search(frame: ArrayView3<'_, u8>, bbox: &BBox, cfg: &SamplerConfig) -> Result<Crop> {
    let rect = context_rect(bbox, cfg)?.scale_about_center(2.0, 2.0);
    crop_square(frame, &rect, cfg.search_size)
}

fn context_rect(bbox: &BBox, cfg: &SamplerConfig) -> Result<BBox> {
    if !bbox.has_positive_area() {
        return Err(FearError::DegenerateBox(format!("{bbox:?}")));
    }
    let grow = 1.0 + 2.0 * cfg.context_offset;
    Ok(bbox.scale_about_center(grow, grow))
}

/// Mean RGB of frame pixels whose centers fall inside `rect`.
fn mean_color(frame: ArrayView3<'_, u8>, rect: &BBox) -> [f32; 3] {
    let (h, w, _) = frame.dim();
    let range = |lo: f64, hi: f64, n: usize| {
        let a = (lo - 0.5).ceil().max(0.0) as usize;
        let b = ((hi - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        a.min(n)..b.max(a.min(n))
    };
    let (xs, ys) = (range(rect.x_min, rect.x_max, w), range(rect.y_min, rect.y_max, h));
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for y in ys {
        for x in xs.clone() {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += frame[[y, x, c]] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return [0.5; 3];
    }
    sum.map(|s| (s / n as f64 / 255.0) as f32)
}

fn bilinear(frame: ArrayView3<'_, u8>, x: f64, y: f64, out: &mut [f32]) {
    let (h, w, _) = frame.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    for (c, o) in out.iter_mut().enumerate() {
        let p = |yy: usize, xx: usize| frame[[yy, xx, c]] as f32;
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        *o = (top * (1.0 - fy) + bottom * fy) / 255.0;
    }
}

fn crop_square(frame: ArrayView3<'_, u8>, rect: &BBox, out_size: usize) -> Result<Crop> {
    let (h, w, c) = frame.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(FearError::DimensionMismatch(format!(
            "expected an RGB frame, got {h}x{w}x{c}"
        )));
    }
    let side = rect.width().max(rect.height());
    let (cx, cy) = rect.center();
    let transform = CropTransform {
        origin_x: cx - side / 2.0,
        origin_y: cy - side / 2.0,
        scale: side / out_size as f64,
    };
    let fill = mean_color(frame, &rect.clamp_to(w as f64, h as f64));
    let mut image = Array3::zeros((out_size, out_size, 3));
    let mut px = [0f32; 3];
    for v in 0..out_size {
        for u in 0..out_size {
            let (fx, fy) = transform.to_frame(u as f64 + 0.5, v as f64 + 0.5);
            let inside_rect = rect.contains_point(fx, fy);
            let inside_frame = fx >= 0.0 && fy >= 0.0 && fx <= w as f64 && fy <= h as f64;
            if inside_rect && inside_frame {
                bilinear(frame, fx - 0.5, fy - 0.5, &mut px);
            } else {
                px = fill;
            }
            for k in 0..3 {
                image[[v, u, k]] = px[k];
            }
        }
    }
    Ok(Crop { image, transform })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(h: usize, w: usize) -> Array3<u8> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((x + 2 * y + 40 * c) % 256) as u8)
    }

    #[test]
    fn crops_have_fixed_sizes() {
        let cfg = SamplerConfig::default();
        let frame = gradient_frame(120, 160);
        for b in [
            BBox::new(50.0, 40.0, 90.0, 70.0),
            BBox::new(0.0, 0.0, 8.0, 30.0),
            BBox::new(100.0, 10.0, 160.0, 120.0),
        ] {
            assert_eq!(crop_template(frame.view(), &b, &cfg).unwrap().image.dim(), (128, 128, 3));
            assert_eq!(crop_search(frame.view(), &b, &cfg).unwrap().image.dim(), (256, 256, 3));
        }
    }

    #[test]
    fn interior_box_needs_no_padding() {
        let cfg = SamplerConfig::default();
        let mut frame = Array3::from_elem((200, 200, 3), 20u8);
        // bright object in the middle
        for y in 90..110 {
            for x in 90..110 {
                frame[[y, x, 0]] = 250;
            }
        }
        let b = BBox::new(90.0, 90.0, 110.0, 110.0);
        let crop = crop_template(frame.view(), &b, &cfg).unwrap();
        assert!(crop.image[[64, 64, 0]] > 0.95);
        // corners come from the real background, not a fill value
        assert!((crop.image[[0, 0, 0]] - 20.0 / 255.0).abs() < 1e-6);
        let (ox, oy) = crop.transform.to_crop(100.0, 100.0);
        assert!((ox - 64.0).abs() < 1e-9 && (oy - 64.0).abs() < 1e-9);
    }

    #[test]
    fn edge_box_is_filled_with_mean() {
        let cfg = SamplerConfig::default();
        let frame = gradient_frame(100, 100);
        let b = BBox::new(0.0, 0.0, 20.0, 20.0);
        let crop = crop_template(frame.view(), &b, &cfg).unwrap();
        let rect = context_rect(&b, &cfg).unwrap().clamp_to(100.0, 100.0);
        let mean = mean_color(frame.view(), &rect);
        for k in 0..3 {
            assert!((crop.image[[0, 0, k]] - mean[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn wide_box_pads_short_axis() {
        let cfg = SamplerConfig::default();
        let frame = gradient_frame(300, 300);
        let b = BBox::new(100.0, 140.0, 200.0, 190.0);
        let crop = crop_template(frame.view(), &b, &cfg).unwrap();
        // expanded long side is 140 px
        assert!((crop.transform.scale * 128.0 - 140.0).abs() < 1e-9);
        // corners of the box map back to the frame exactly
        let back = crop.transform.box_to_frame(&crop.transform.box_to_crop(&b));
        assert!((back.x_min - b.x_min).abs() < 1e-9 && (back.y_max - b.y_max).abs() < 1e-9);
        // rows above the expanded rectangle are mean padding
        let rect = context_rect(&b, &cfg).unwrap();
        let mean = mean_color(frame.view(), &rect);
        assert!((crop.image[[2, 64, 1]] - mean[1]).abs() < 1e-6);
        let (_, top) = crop.transform.to_crop(0.0, rect.y_min);
        assert!(top > 20.0);
    }

    #[test]
    fn search_region_doubles_template_region() {
        let cfg = SamplerConfig::default();
        let frame = gradient_frame(400, 400);
        let b = BBox::new(150.0, 160.0, 210.0, 230.0);
        let t = crop_template(frame.view(), &b, &cfg).unwrap();
        let s = crop_search(frame.view(), &b, &cfg).unwrap();
        assert!((s.transform.scale * 256.0 - 2.0 * t.transform.scale * 128.0).abs() < 1e-9);
        let (tcx, tcy) = t.transform.to_frame(64.0, 64.0);
        let (scx, scy) = s.transform.to_frame(128.0, 128.0);
        assert!((tcx - scx).abs() < 1e-9 && (tcy - scy).abs() < 1e-9);
    }

    #[test]
    fn corner_object_fill_matches_outside_area() {
        let cfg = SamplerConfig::default();
        let frame = gradient_frame(200, 200);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let s = crop_search(frame.view(), &b, &cfg).unwrap();
        let rect = context_rect(&b, &cfg).unwrap().scale_about_center(2.0, 2.0);
        let fill = mean_color(frame.view(), &rect.clamp_to(200.0, 200.0));
        let mut filled = 0;
        for v in 0..256 {
            for u in 0..256 {
                if (0..3).all(|k| s.image[[v, u, k]] == fill[k]) {
                    filled += 1;
                }
            }
        }
        let frac = filled as f64 / (256.0 * 256.0);
        // the search rect spans [-9, 19) on both axes
        let inside = (rect.x_max / rect.width()).powi(2);
        assert!((frac - (1.0 - inside)).abs() < 0.02, "fill fraction {frac} vs {}", 1.0 - inside);
        let gt = s.transform.box_to_crop(&b);
        let back = s.transform.box_to_frame(&gt);
        assert!((back.x_max - 10.0).abs() < 0.5);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let cfg = SamplerConfig::default();
        let frame = gradient_frame(50, 50);
        let b = BBox::new(10.0, 10.0, 10.0, 30.0);
        assert!(matches!(
            crop_template(frame.view(), &b, &cfg),
            Err(FearError::DegenerateBox(_))
        ));
    }
}
