mod common;

use common::{rand_tensor, rng};
use ghosthead::boxes::{iou, BBox, LetterboxTransform};
use ghosthead::model::HeadOutputs;
use ghosthead::postprocess::{decode, detect, dfl_expect, nms, DecodeConfig, Detection};
use ghosthead::Tensor;
use proptest::prelude::*;
use rand::Rng;

const RM: usize = 16;
const NC: usize = 10;

fn head(maps: [Tensor<f32>; 3]) -> HeadOutputs<f32> {
    HeadOutputs { maps, strides: [8, 16, 32], nc: NC, reg_max: RM }
}

/// Maps for a `size` canvas filled with `box_logit` and `cls_logit`.
fn flat_head(size: usize, box_logit: f32, cls_logit: f32) -> HeadOutputs<f32> {
    let map = |s: usize| {
        Tensor::from_fn(
            (1, 4 * RM + NC, size / s, size / s),
            |_, c, _, _| if c < 4 * RM { box_logit } else { cls_logit },
        )
    };
    head([map(8), map(16), map(32)])
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unvectorized per-cell decoder.
fn oracle_decode(raw: &HeadOutputs<f32>, conf: f64, lb: &LetterboxTransform) -> Vec<Detection> {
    let mut out = Vec::new();
    for (map, &s) in raw.maps.iter().zip(&raw.strides) {
        let d = map.dims();
        for y in 0..d.h {
            for x in 0..d.w {
                let scores: Vec<f64> = (0..NC).map(|c| sig(map.at(0, 4 * RM + c, y, x) as f64)).collect();
                let mut cls = 0;
                for c in 1..NC {
                    if scores[c] > scores[cls] {
                        cls = c;
                    }
                }
                if scores[cls] < conf {
                    continue;
                }
                let mut dist = [0.0; 4];
                for (side, dv) in dist.iter_mut().enumerate() {
                    let e: Vec<f64> = (0..RM).map(|k| (map.at(0, side * RM + k, y, x) as f64).exp()).collect();
                    let z: f64 = e.iter().sum();
                    *dv = e.iter().enumerate().map(|(k, v)| k as f64 * v / z).sum::<f64>() * s as f64;
                }
                let cx = (x as f64 + 0.5) * s as f64;
                let cy = (y as f64 + 0.5) * s as f64;
                let inv = |v: f64, pad: f64| (v - pad) / lb.scale;
                let clip = |v: f64, hi: usize| v.max(0.0).min(hi as f64);
                let b = BBox::new(
                    clip(inv(cx - dist[0], lb.pad_x), lb.orig_w),
                    clip(inv(cy - dist[1], lb.pad_y), lb.orig_h),
                    clip(inv(cx + dist[2], lb.pad_x), lb.orig_w),
                    clip(inv(cy + dist[3], lb.pad_y), lb.orig_h),
                );
                if b.x1 < b.x2 && b.y1 < b.y2 {
                    out.push(Detection { class_id: cls, confidence: scores[cls], bbox: b });
                }
            }
        }
    }
    out
}

#[test]
fn dfl_examples() {
    assert!((dfl_expect(&[0.3f32; RM]) - 7.5).abs() < 1e-9);
    let mut l = [0.0f64; RM];
    l[3] = 20.0;
    assert!((dfl_expect(&l) - 3.0).abs() < 1e-4);
}

proptest! {
    #[test]
    fn dfl_monotone_in_last_bin(logits in prop::collection::vec(-5.0f64..5.0, RM), bump in 0.0f64..10.0) {
        let before = dfl_expect(&logits);
        let mut l = logits.clone();
        l[RM - 1] += bump;
        let after = dfl_expect(&l);
        prop_assert!(after >= before - 1e-12);
        prop_assert!((0.0..=15.0).contains(&after));
    }
}

#[test]
fn low_class_logits_give_nothing() {
    let lb = LetterboxTransform::new(640, 640, 640).unwrap();
    let raw = flat_head(640, 0.0, -20.0);
    assert!(decode(&raw, 0, &DecodeConfig::INTERACTIVE, &lb).is_empty());
}

#[test]
fn uniform_box_logits_give_7_5_bins() {
    let lb = LetterboxTransform::new(640, 640, 640).unwrap();
    let mut raw = flat_head(640, 0.0, -20.0);
    for (y, x) in [(0, 0), (10, 10)] {
        *raw.maps[0].at_mut(0, 4 * RM + 2, y, x) = 5.0;
    }
    let dets = decode(&raw, 0, &DecodeConfig::INTERACTIVE, &lb);
    assert_eq!(dets.len(), 2);
    // cell (0,0): center (4,4), half extent 60, clipped at the top-left
    let b = dets[0].bbox;
    assert!((b.x1, b.y1) == (0.0, 0.0) && (b.x2 - 64.0).abs() < 1e-9 && (b.y2 - 64.0).abs() < 1e-9, "{b:?}");
    // cell (10,10): center (84,84), unclipped
    let b = dets[1].bbox;
    for (v, e) in [(b.x1, 24.0), (b.y1, 24.0), (b.x2, 144.0), (b.y2, 144.0)] {
        assert!((v - e).abs() < 1e-9, "{b:?}");
    }
    assert_eq!(dets[0].class_id, 2);
}

#[test]
fn decode_matches_per_cell_oracle() {
    let mut r = rng(11);
    for trial in 0..20 {
        let (ow, oh) = (r.random_range(20..300), r.random_range(20..300));
        let lb = LetterboxTransform::new(ow, oh, 64).unwrap();
        let raw = head([
            rand_tensor((1, 4 * RM + NC, 8, 8), -4.0, 4.0, &mut r),
            rand_tensor((1, 4 * RM + NC, 4, 4), -4.0, 4.0, &mut r),
            rand_tensor((1, 4 * RM + NC, 2, 2), -4.0, 4.0, &mut r),
        ]);
        let cfg = DecodeConfig::EVAL.with_thresholds(0.5, 0.7).unwrap();
        let got = decode(&raw, 0, &cfg, &lb);
        let want = oracle_decode(&raw, 0.5, &lb);
        assert_eq!(got.len(), want.len(), "trial {trial}");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.class_id, w.class_id);
            assert!((g.confidence - w.confidence).abs() < 1e-12);
            for (a, b) in
                [(g.bbox.x1, w.bbox.x1), (g.bbox.y1, w.bbox.y1), (g.bbox.x2, w.bbox.x2), (g.bbox.y2, w.bbox.y2)]
            {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(g.bbox.is_valid() && (0.0..=1.0).contains(&g.confidence));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Logits built from a target box decode back to it.
    #[test]
    fn decode_inverts_encode(scale in 0usize..3, cx in 40.0f64..88.0, cy in 40.0f64..88.0, w in 4.0f64..60.0, h in 4.0f64..60.0) {
        let size = 128;
        let s = [8usize, 16, 32][scale];
        let mut raw = flat_head(size, -30.0, -20.0);
        let (col, row) = ((cx / s as f64) as usize, (cy / s as f64) as usize);
        let (ccx, ccy) = ((col as f64 + 0.5) * s as f64, (row as f64 + 0.5) * s as f64);
        let target = BBox::from_cxcywh(cx, cy, w, h);
        let dists = [ccx - target.x1, ccy - target.y1, target.x2 - ccx, target.y2 - ccy];
        // only boxes that contain their cell center are representable
        prop_assume!(dists.iter().all(|d| *d >= 0.0 && *d / s as f64 <= (RM - 1) as f64));
        let map = &mut raw.maps[scale];
        for (side, d) in dists.iter().enumerate() {
            let d = (d / s as f64).clamp(0.0, (RM - 1) as f64 - 1e-9);
            let lo = d.floor() as usize;
            let frac = d - lo as f64;
            for (k, wt) in [(lo, 1.0 - frac), (lo + 1, frac)] {
                if k < RM && wt > 0.0 {
                    *map.at_mut(0, side * RM + k, row, col) = wt.ln() as f32;
                }
            }
        }
        *map.at_mut(0, 4 * RM, row, col) = 10.0;
        let lb = LetterboxTransform::new(size, size, size).unwrap();
        let dets = decode(&raw, 0, &DecodeConfig::INTERACTIVE, &lb);
        prop_assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        let unclipped = b.x1 > 0.0 && b.y1 > 0.0 && b.x2 < size as f64 && b.y2 < size as f64;
        if unclipped {
            let (gx, gy) = b.center();
            prop_assert!((gx - cx).abs() <= 1.0 && (gy - cy).abs() <= 1.0, "{:?} vs {:?}", b, target);
        }
        for (got, want) in [(b.x1, target.x1.max(0.0)), (b.y1, target.y1.max(0.0)), (b.x2, target.x2.min(128.0)), (b.y2, target.y2.min(128.0))] {
            prop_assert!((got - want).abs() <= s as f64);
        }
    }
}

fn rand_box(r: &mut impl Rng) -> BBox {
    let (x, y) = (r.random_range(0.0..50.0), r.random_range(0.0..50.0));
    BBox::new(x, y, x + r.random_range(1.0..30.0), y + r.random_range(1.0..30.0))
}

#[test]
fn iou_examples() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(3.0, 3.0, 4.0, 4.0)), 0.0);
    assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (rand_box(&mut r), rand_box(&mut r));
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

fn det(class_id: usize, confidence: f64, bbox: BBox) -> Detection {
    Detection { class_id, confidence, bbox }
}

#[test]
fn nms_examples() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = BBox::new(0.0, 2.5, 10.0, 12.5); // IoU 0.6
    assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
    assert_eq!(nms(&[det(0, 0.9, a)], 0.5).len(), 1);
    let kept = nms(&[det(1, 0.7, b), det(1, 0.9, a)], 0.5);
    assert_eq!(kept, vec![det(1, 0.9, a)]);
    assert_eq!(nms(&[det(1, 0.7, b), det(2, 0.9, a)], 0.5).len(), 2);
}

/// Per class, repeatedly keep the best remaining box and strike its overlaps.
pub fn oracle_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) => {
                    let (a, b) = (&dets[i], &dets[j]);
                    let better =
                        a.confidence > b.confidence || (a.confidence == b.confidence && a.class_id < b.class_id);
                    Some(if better { i } else { j })
                }
            };
        }
        let Some(i) = best else { break };
        alive[i] = false;
        kept.push(dets[i]);
        for j in 0..dets.len() {
            if alive[j] && dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

proptest! {
    #[test]
    fn nms_properties(seed in any::<u64>(), thr in 0.1f64..0.9) {
        let mut r = rng(seed);
        let n = r.random_range(0..25);
        let dets: Vec<Detection> =
            (0..n).map(|i| det(r.random_range(0..3), 0.01 + i as f64 / 30.0, rand_box(&mut r))).collect();
        let kept = nms(&dets, thr);
        prop_assert_eq!(&kept, &oracle_nms(&dets, thr));
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        let mut shuffled = dets.clone();
        shuffled.reverse();
        prop_assert_eq!(nms(&shuffled, thr), kept);
    }
}

#[test]
fn detect_applies_nms() {
    let lb = LetterboxTransform::new(64, 64, 64).unwrap();
    let raw = flat_head(64, 0.0, 3.0);
    let cfg = DecodeConfig::INTERACTIVE;
    let all = decode(&raw, 0, &cfg, &lb);
    let kept = detect(&raw, 0, &cfg, &lb);
    assert!(kept.len() < all.len());
    assert_eq!(kept, nms(&all, cfg.nms_iou));
}
