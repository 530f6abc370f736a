use std::fmt::Write as _;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::metrics::Annotation;

use super::NUM_CLASSES;

/// One object as `class cx cy w h`, coordinates normalized to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Label {
    pub fn to_annotation(&self, img_w: usize, img_h: usize) -> Annotation {
        let (iw, ih) = (img_w as f64, img_h as f64);
        Annotation {
            class_id: self.class_id,
            bbox: BBox::from_cxcywh(self.cx * iw, self.cy * ih, self.w * iw, self.h * ih),
        }
    }

    pub fn from_annotation(a: &Annotation, img_w: usize, img_h: usize) -> Self {
        let (iw, ih) = (img_w as f64, img_h as f64);
        let (cx, cy) = a.bbox.center();
        Label { class_id: a.class_id, cx: cx / iw, cy: cy / ih, w: a.bbox.width() / iw, h: a.bbox.height() / ih }
    }
}

fn label_err(line: usize, message: impl Into<String>) -> Error {
    Error::Label { line, message: message.into() }
}

/// Parses normalized labels; blank lines are skipped.
pub fn parse_normalized(text: &str) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 5 {
            return Err(label_err(n, format!("expected 5 fields, got {}", f.len())));
        }
        let class_id: usize = f[0].parse().map_err(|_| label_err(n, format!("bad class id `{}`", f[0])))?;
        if class_id >= NUM_CLASSES {
            return Err(label_err(n, format!("class id {class_id} out of range")));
        }
        let mut v = [0.0f64; 4];
        for (k, s) in f[1..].iter().enumerate() {
            let x: f64 = s.parse().map_err(|_| label_err(n, format!("bad number `{s}`")))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(label_err(n, format!("value {x} outside [0, 1]")));
            }
            v[k] = x;
        }
        out.push(Label { class_id, cx: v[0], cy: v[1], w: v[2], h: v[3] });
    }
    Ok(out)
}

/// Parses normalized labels into pixel boxes for an `img_w`×`img_h` image.
pub fn parse_labels(text: &str, img_w: usize, img_h: usize) -> Result<Vec<Annotation>> {
    Ok(parse_normalized(text)?.iter().map(|l| l.to_annotation(img_w, img_h)).collect())
}

pub fn write_normalized(labels: &[Label]) -> String {
    let mut s = String::new();
    for l in labels {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", l.class_id, l.cx, l.cy, l.w, l.h);
    }
    s
}

pub fn write_labels(anns: &[Annotation], img_w: usize, img_h: usize) -> String {
    let labels: Vec<Label> = anns.iter().map(|a| Label::from_annotation(a, img_w, img_h)).collect();
    write_normalized(&labels)
}

/// Converts VisDrone `left,top,w,h,score,category,truncation,occlusion`
/// lines. Categories 0 (ignored region) and 11 (others) are dropped, 1–10
/// map to classes 0–9. Boxes are clipped to the image; empty ones are dropped.
pub fn convert_visdrone(text: &str, img_w: usize, img_h: usize) -> Result<Vec<Label>> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::InvalidParameter("image dims must be positive".into()));
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim().trim_end_matches(',');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(label_err(n, format!("expected 8 comma-separated fields, got {}", f.len())));
        }
        let mut v = [0i64; 8];
        for (k, s) in f.iter().enumerate() {
            v[k] = s.parse().map_err(|_| label_err(n, format!("bad integer `{s}`")))?;
        }
        let [left, top, w, h, _score, category, _, _] = v;
        let class_id = match category {
            0 | 11 => continue,
            1..=10 => (category - 1) as usize,
            c => return Err(label_err(n, format!("unknown category {c}"))),
        };
        if w < 0 || h < 0 {
            return Err(label_err(n, "negative box size"));
        }
        let b =
            BBox::new(left as f64, top as f64, (left + w) as f64, (top + h) as f64).clip(img_w as f64, img_h as f64);
        if !b.is_valid() {
            continue;
        }
        out.push(Label::from_annotation(&Annotation { class_id, bbox: b }, img_w, img_h));
    }
    Ok(out)
}
