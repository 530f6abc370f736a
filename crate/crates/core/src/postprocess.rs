//! Raw head maps to image-space detections.
//!
//! Box channels are side-major: channel `s·reg_max + k` holds bin `k` of
//! side `s` in (left, top, right, bottom) order.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::boxes::{iou, BBox, LetterboxTransform};
use crate::error::{Error, Result};
use crate::model::HeadOutputs;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub reg_max: usize,
    pub strides: [usize; 3],
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl DecodeConfig {
    /// Dense operating point used for mAP evaluation.
    pub const EVAL: DecodeConfig =
        DecodeConfig { reg_max: 16, strides: [8, 16, 32], conf_threshold: 0.001, nms_iou: 0.7 };
    /// Defaults for single-image inference.
    pub const INTERACTIVE: DecodeConfig =
        DecodeConfig { reg_max: 16, strides: [8, 16, 32], conf_threshold: 0.25, nms_iou: 0.45 };

    pub fn with_thresholds(self, conf_threshold: f64, nms_iou: f64) -> Result<Self> {
        for (name, v) in [("confidence threshold", conf_threshold), ("NMS IoU threshold", nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} {v} not in [0, 1]")));
            }
        }
        Ok(DecodeConfig { conf_threshold, nms_iou, ..self })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Expected bin index under the softmax of `logits`.
pub fn dfl_expect<T: Scalar>(logits: &[T]) -> f64 {
    let m = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in logits.iter().enumerate() {
        let e = (v.as_f64() - m).exp();
        num += i as f64 * e;
        den += e;
    }
    num / den
}

/// Thresholded detections of image `batch` before NMS, in (scale, row,
/// column) order, mapped back to original image pixels and clipped.
pub fn decode<T: Scalar>(
    raw: &HeadOutputs<T>,
    batch: usize,
    cfg: &DecodeConfig,
    lb: &LetterboxTransform,
) -> Vec<Detection> {
    let rm = raw.reg_max;
    let mut out = Vec::new();
    let mut bins = vec![0.0f64; rm];
    for (map, &stride) in raw.maps.iter().zip(&raw.strides) {
        let d = map.dims();
        let s = stride as f64;
        for row in 0..d.h {
            for col in 0..d.w {
                let mut best = (0usize, f64::NEG_INFINITY);
                for c in 0..raw.nc {
                    let v = map.at(batch, 4 * rm + c, row, col).as_f64();
                    if v > best.1 {
                        best = (c, v);
                    }
                }
                let score = sigmoid(best.1);
                if score < cfg.conf_threshold {
                    continue;
                }
                let mut dist = [0.0; 4];
                for (side, dv) in dist.iter_mut().enumerate() {
                    for (k, b) in bins.iter_mut().enumerate() {
                        *b = map.at(batch, side * rm + k, row, col).as_f64();
                    }
                    *dv = dfl_expect(&bins) * s;
                }
                let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                let canvas = BBox::new(cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]);
                let bbox = lb.inverse(&canvas).clip(lb.orig_w as f64, lb.orig_h as f64);
                if bbox.is_valid() {
                    out.push(Detection { class_id: best.0, confidence: score, bbox });
                }
            }
        }
    }
    out
}

/// Greedy class-aware suppression. Order: confidence descending, then
/// smaller class id, then input position.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thr) {
            kept.push(*d);
        }
    }
    kept
}

/// `decode` followed by `nms`.
pub fn detect<T: Scalar>(
    raw: &HeadOutputs<T>,
    batch: usize,
    cfg: &DecodeConfig,
    lb: &LetterboxTransform,
) -> Vec<Detection> {
    nms(&decode(raw, batch, cfg, lb), cfg.nms_iou)
}

/// One line per detection: `image class confidence x1 y1 x2 y2`.
pub fn format_detections(image_id: &str, dets: &[Detection], names: &[&str]) -> String {
    let mut s = String::new();
    for d in dets {
        let name = names.get(d.class_id).copied().unwrap_or("unknown");
        let b = d.bbox;
        let _ = writeln!(s, "{image_id} {name} {:.6} {:.2} {:.2} {:.2} {:.2}", d.confidence, b.x1, b.y1, b.x2, b.y2);
    }
    s
}
