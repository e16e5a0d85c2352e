//! Boxes and crop transforms.
//!
//! Pixel coordinates are continuous: pixel `(row, col)` covers
//! `[col, col + 1) x [row, row + 1)` and its center sits at `col + 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{FearError, Result};

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixels of some
/// reference frame (full frame or search crop).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Area, zero for inverted or empty boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn has_positive_area(&self) -> bool {
        self.is_finite() && self.width() > 0.0 && self.height() > 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    /// Scales the box about its own center.
    pub fn scale_about_center(&self, fx: f64, fy: f64) -> BBox {
        let (cx, cy) = self.center();
        BBox::from_center_size(cx, cy, self.width() * fx, self.height() * fy)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    /// Euclidean distance between box centers.
    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    pub fn ensure_positive_area(&self) -> Result<()> {
        if self.has_positive_area() {
            Ok(())
        } else {
            Err(FearError::DegenerateBox(format!("{self:?}")))
        }
    }
}

/// Similarity transform between crop pixels and source-frame pixels:
/// `frame = origin + crop * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Source-frame pixels per crop pixel.
    pub scale: f64,
}

impl CropTransform {
    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin_x + x * self.scale,
            self.origin_y + y * self.scale,
        )
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.scale,
            (y - self.origin_y) / self.scale,
        )
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.to_frame(b.x_min, b.y_min);
        let (x1, y1) = self.to_frame(b.x_max, b.y_max);
        BBox::new(x0, y0, x1, y1)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.to_crop(b.x_min, b.y_min);
        let (x1, y1) = self.to_crop(b.x_max, b.y_max);
        BBox::new(x0, y0, x1, y1)
    }
}
