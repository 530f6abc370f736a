//! Detection matching, precision/recall curves, AP and mAP at IoU 0.5.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::postprocess::Detection;

/// Ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Detections processed by descending confidence (ties keep input order);
/// each takes the unmatched ground truth with the highest IoU ≥ `iou_thr`.
/// Returns true-positive flags in input order.
pub fn match_detections(dets: &[(f64, BBox)], gts: &[BBox], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.partial_cmp(&dets[a].0).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[i].1, gt);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[i] = true;
        }
    }
    tp
}

pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

pub fn recall(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

/// Harmonic mean; works on fractions or percentages alike.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub confidence: f64,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// One point per distinct confidence, highest first.
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
}

impl PrCurve {
    /// Builds a curve from `(confidence, is_tp)` pairs. Detections sharing a
    /// confidence enter the curve together, so only the ranking matters.
    pub fn from_scored(scored: &[(f64, bool)], n_gt: usize) -> Self {
        let mut s = scored.to_vec();
        s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let mut points: Vec<PrPoint> = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (i, &(conf, hit)) in s.iter().enumerate() {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            if s.get(i + 1).is_some_and(|n| n.0 == conf) {
                continue;
            }
            points.push(PrPoint {
                confidence: conf,
                tp,
                fp,
                precision: precision(tp, fp),
                recall: recall(tp, n_gt.saturating_sub(tp)),
            });
        }
        PrCurve { points, n_gt }
    }

    /// Precision made non-increasing from the right.
    pub fn envelope(&self) -> Vec<f64> {
        let mut env: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        env
    }
}

/// All-point interpolated area under the precision envelope; 0 without
/// ground truth.
pub fn average_precision(curve: &PrCurve) -> f64 {
    if curve.n_gt == 0 {
        return 0.0;
    }
    let env = curve.envelope();
    let mut prev_r = 0.0;
    let mut area = 0.0;
    for (p, e) in curve.points.iter().zip(env) {
        area += (p.recall - prev_r) * e;
        prev_r = p.recall;
    }
    area
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::InvalidParameter("mAP of an empty class list".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The curve point with the highest F1; ties go to the higher confidence.
pub fn operating_point(curve: &PrCurve) -> OperatingPoint {
    let mut best = OperatingPoint { confidence: 0.0, precision: 0.0, recall: 0.0, f1: 0.0 };
    for (i, p) in curve.points.iter().enumerate() {
        let f = f1(p.precision, p.recall);
        if i == 0 || f > best.f1 {
            best = OperatingPoint { confidence: p.confidence, precision: p.precision, recall: p.recall, f1: f };
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub name: String,
    pub instances: usize,
    pub curve: PrCurve,
    pub ap: f64,
    pub op: OperatingPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one instance.
    pub map: f64,
    /// Means of the per-class operating-point values.
    pub precision: f64,
    pub recall: f64,
    /// F1 of the mean precision and recall.
    pub f1: f64,
    /// Mean interpolated precision over classes on a 101-point recall grid.
    pub mean_curve: Vec<(f64, f64)>,
}

/// Per-image detections and ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Annotation>,
}

pub fn evaluate(images: &[ImageResult], names: &[&str], iou_thr: f64) -> Result<EvalReport> {
    let nc = names.len();
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); nc];
    let mut n_gt = vec![0usize; nc];
    for img in images {
        for a in &img.ground_truth {
            if a.class_id >= nc {
                return Err(Error::InvalidParameter(format!("class id {} out of range", a.class_id)));
            }
            n_gt[a.class_id] += 1;
        }
        for c in 0..nc {
            let dets: Vec<(f64, BBox)> =
                img.detections.iter().filter(|d| d.class_id == c).map(|d| (d.confidence, d.bbox)).collect();
            if dets.is_empty() {
                continue;
            }
            let gts: Vec<BBox> = img.ground_truth.iter().filter(|a| a.class_id == c).map(|a| a.bbox).collect();
            let flags = match_detections(&dets, &gts, iou_thr);
            scored[c].extend(dets.iter().zip(flags).map(|(d, f)| (d.0, f)));
        }
    }
    let classes: Vec<ClassReport> = (0..nc)
        .map(|c| {
            let curve = PrCurve::from_scored(&scored[c], n_gt[c]);
            let ap = average_precision(&curve);
            let op = operating_point(&curve);
            ClassReport { name: names[c].to_string(), instances: n_gt[c], curve, ap, op }
        })
        .collect();
    let present: Vec<&ClassReport> = classes.iter().filter(|c| c.instances > 0).collect();
    if present.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mean = |f: &dyn Fn(&ClassReport) -> f64| present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64;
    let map = mean_ap(&present.iter().map(|c| c.ap).collect::<Vec<_>>())?;
    let (p, r) = (mean(&|c| c.op.precision), mean(&|c| c.op.recall));
    let mean_curve = (0..=100)
        .map(|i| {
            let rr = i as f64 / 100.0;
            (rr, mean(&|c| interpolated_precision(&c.curve, rr)))
        })
        .collect();
    Ok(EvalReport { classes, map, precision: p, recall: r, f1: f1(p, r), mean_curve })
}

/// Envelope precision at the first point reaching recall `r`, else 0.
fn interpolated_precision(curve: &PrCurve, r: f64) -> f64 {
    let env = curve.envelope();
    curve.points.iter().zip(env).find(|(p, _)| p.recall >= r).map_or(0.0, |(_, e)| e)
}

impl EvalReport {
    /// Percentages with one decimal; the last line carries mAP.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>9} {:>7} {:>7} {:>7} {:>7}\n", "class", "instances", "P", "R", "F1", "AP50");
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        for c in &self.classes {
            let flag = if c.instances == 0 { " (no instances, excluded)" } else { "" };
            let _ = writeln!(
                s,
                "{:<16} {:>9} {:>7} {:>7} {:>7} {:>7}{flag}",
                c.name,
                c.instances,
                pct(c.op.precision),
                pct(c.op.recall),
                pct(c.op.f1),
                pct(c.ap)
            );
        }
        let total: usize = self.classes.iter().map(|c| c.instances).sum();
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>7} {:>7} {:>7} {:>7}",
            "all",
            total,
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            pct(self.map)
        );
        let _ = writeln!(s, "mAP@0.5: {:.4}", self.map);
        s
    }

    /// `class,instances,precision,recall,f1,ap50`.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("class,instances,precision,recall,f1,ap50\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{},{},{},{}", c.name, c.instances, c.op.precision, c.op.recall, c.op.f1, c.ap);
        }
        let total: usize = self.classes.iter().map(|c| c.instances).sum();
        let _ = writeln!(s, "all,{total},{},{},{},{}", self.precision, self.recall, self.f1, self.map);
        s
    }

    /// `class,confidence,precision,recall`; rows of the `all` mean curve
    /// leave confidence empty.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("class,confidence,precision,recall\n");
        for c in &self.classes {
            for p in &c.curve.points {
                let _ = writeln!(s, "{},{},{},{}", c.name, p.confidence, p.precision, p.recall);
            }
        }
        for (r, p) in &self.mean_curve {
            let _ = writeln!(s, "all,,{p},{r}");
        }
        s
    }
}

/// A row of a curves CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub class: String,
    pub confidence: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::Label { line: i + 1, message: m.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(CurveRow {
            class: f[0].to_string(),
            confidence: if f[1].is_empty() { None } else { Some(num(f[1])?) },
            precision: num(f[2])?,
            recall: num(f[3])?,
        });
    }
    Ok(rows)
}
