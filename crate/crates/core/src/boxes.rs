//! Axis-aligned boxes and the letterbox mapping between image and input space.

use crate::error::{Error, Result};

/// Corner-form box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Zero for degenerate boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, w: f64, h: f64) -> Self {
        BBox::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = self.x2.min(o.x2) - self.x1.max(o.x1);
        let h = self.y2.min(o.y2) - self.y1.max(o.y1);
        w.max(0.0) * h.max(0.0)
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection(b);
    (inter / (aa + ab - inter)).clamp(0.0, 1.0)
}

/// Aspect-preserving resize into a square canvas with centered padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_w: usize,
    pub orig_h: usize,
    /// Canvas side.
    pub size: usize,
}

impl LetterboxTransform {
    pub fn new(orig_w: usize, orig_h: usize, size: usize) -> Result<Self> {
        if orig_w == 0 || orig_h == 0 || size == 0 {
            return Err(Error::InvalidParameter(format!("letterbox of a {orig_w}x{orig_h} image into {size}")));
        }
        let scale = (size as f64 / orig_w as f64).min(size as f64 / orig_h as f64);
        let (w, h) = self::resized(orig_w, orig_h, scale, size);
        Ok(LetterboxTransform {
            scale,
            pad_x: ((size - w) / 2) as f64,
            pad_y: ((size - h) / 2) as f64,
            orig_w,
            orig_h,
            size,
        })
    }

    /// Size of the resized image inside the canvas.
    pub fn inner_size(&self) -> (usize, usize) {
        resized(self.orig_w, self.orig_h, self.scale, self.size)
    }

    /// Image space to canvas space.
    pub fn forward(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x1 * self.scale + self.pad_x,
            b.y1 * self.scale + self.pad_y,
            b.x2 * self.scale + self.pad_x,
            b.y2 * self.scale + self.pad_y,
        )
    }

    /// Canvas space to image space (not clipped).
    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x1 - self.pad_x) / self.scale,
            (b.y1 - self.pad_y) / self.scale,
            (b.x2 - self.pad_x) / self.scale,
            (b.y2 - self.pad_y) / self.scale,
        )
    }
}

fn resized(w: usize, h: usize, scale: f64, size: usize) -> (usize, usize) {
    let r = |v: usize| ((v as f64 * scale).round() as usize).clamp(1, size);
    (r(w), r(h))
}
