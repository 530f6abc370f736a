mod common;

use common::rng;
use ghosthead::boxes::{BBox, LetterboxTransform};
use ghosthead::data::{
    convert_visdrone, load_sample, parse_labels, parse_normalized, synth_samples, to_input_tensor, write_labels,
    write_normalized, write_synth_dataset, ImageBuffer, Manifest, BACKGROUND, CLASS_COLORS, CLASS_NAMES, MAX_SIDE,
    MIN_SIDE,
};
use ghosthead::metrics::{evaluate, Annotation, ImageResult};
use ghosthead::postprocess::Detection;
use ghosthead::Error;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn ppm_examples() {
    let img = ImageBuffer::decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
    assert_eq!((img.width, img.height, img.pixel(0, 0)), (1, 1, [255, 0, 0]));
    let img = ImageBuffer::decode_ppm(b"P6 # made by hand\n# another\n 2\t1 255 \x01\x02\x03\x04\x05\x06").unwrap();
    assert_eq!(img.pixel(1, 0), [4, 5, 6]);

    assert!(matches!(ImageBuffer::decode_ppm(b"P3\n1 1\n255\n1 2 3"), Err(Error::Format(_))));
    assert!(matches!(ImageBuffer::decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Format(_))));
    assert!(matches!(ImageBuffer::decode_ppm(b"P6\n2 2\n255\n\0\0\0"), Err(Error::Truncated(_))));
    assert!(matches!(ImageBuffer::decode_ppm(b"P6\n2"), Err(Error::Truncated(_))));
}

proptest! {
    #[test]
    fn ppm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let img = ImageBuffer::new(w, h, (0..3 * w * h).map(|_| r.random()).collect()).unwrap();
        prop_assert_eq!(ImageBuffer::decode_ppm(&img.encode_ppm()).unwrap(), img);
    }
}

#[test]
fn letterbox_examples() {
    let mut r = rng(1);
    let img = ImageBuffer::new(64, 64, (0..3 * 64 * 64).map(|_| r.random()).collect()).unwrap();
    let (t, lb) = to_input_tensor(&img, 64).unwrap();
    assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (1.0, 0.0, 0.0));
    for (x, y) in [(0, 0), (13, 40), (63, 63)] {
        for c in 0..3 {
            assert_eq!(t.at(0, c, y, x), img.pixel(x, y)[c] as f32 / 255.0);
        }
    }

    let wide = ImageBuffer::filled(1280, 640, [255, 0, 0]);
    let (t, lb) = to_input_tensor(&wide, 640).unwrap();
    assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (0.5, 0.0, 160.0));
    let gray = 114.0 / 255.0;
    assert_eq!(
        (t.at(0, 0, 159, 5), t.at(0, 0, 160, 5), t.at(0, 0, 479, 5), t.at(0, 0, 480, 5)),
        (gray, 1.0, 1.0, gray)
    );
    assert!(to_input_tensor(&ImageBuffer::filled(0, 5, [0; 3]), 640).is_err());
}

proptest! {
    #[test]
    fn letterbox_round_trip(w in 1usize..2000, h in 1usize..2000, size in 32usize..1024, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let lb = LetterboxTransform::new(w, h, size).unwrap();
        let (x1, y1) = (fx * w as f64, fy * h as f64);
        for b in [BBox::new(0.0, 0.0, w as f64, h as f64), BBox::new(x1, y1, x1 + 1.0, y1 + 1.0)] {
            let back = lb.inverse(&lb.forward(&b));
            for (p, q) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }
        let (iw, ih) = lb.inner_size();
        prop_assert!(iw <= size && ih <= size && (iw == size || ih == size));
    }
}

#[test]
fn label_examples() {
    let a = parse_labels("3 0.5 0.5 0.2 0.1\n", 100, 100).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].class_id, 3);
    let b = a[0].bbox;
    for (v, e) in [(b.x1, 40.0), (b.y1, 45.0), (b.x2, 60.0), (b.y2, 55.0)] {
        assert!((v - e).abs() < 1e-9);
    }
    assert!(parse_labels("", 10, 10).unwrap().is_empty());
    for (text, line) in
        [("1 0.5 0.5 0.1\n", 1), ("0 0.1 0.1 0.1 0.1\n\n2 0.5 1.5 0.1 0.1\n", 3), ("x 0 0 0 0", 1), ("12 0 0 0 0", 1)]
    {
        match parse_labels(text, 10, 10) {
            Err(Error::Label { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

proptest! {
    #[test]
    fn labels_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let text: String = (0..r.random_range(0..8))
            .map(|_| {
                let v: Vec<String> = (0..4).map(|_| format!("{:.6}", r.random_range(0.0..1.0))).collect();
                format!("{} {}\n", r.random_range(0..10), v.join(" "))
            })
            .collect();
        let parsed = parse_normalized(&text).unwrap();
        prop_assert_eq!(write_normalized(&parsed), text.clone());
        let anns = parse_labels(&text, 640, 480).unwrap();
        prop_assert_eq!(write_labels(&anns, 640, 480), text);
    }
}

#[test]
fn visdrone_examples() {
    let l = convert_visdrone("10,20,30,40,1,4,0,0\n", 100, 100).unwrap();
    assert_eq!(l.len(), 1);
    assert_eq!(l[0].class_id, 3);
    for (v, e) in [(l[0].cx, 0.25), (l[0].cy, 0.40), (l[0].w, 0.30), (l[0].h, 0.40)] {
        assert!((v - e).abs() < 1e-12);
    }
    assert!(convert_visdrone("1,2,3,4,0,0,0,0", 100, 100).unwrap().is_empty());
    assert!(matches!(convert_visdrone("1,2,3,4,0,1,0,0\n1,2,3\n", 100, 100), Err(Error::Label { line: 2, .. })));

    let mut r = rng(3);
    let mut text = String::new();
    let mut kept = 0;
    for _ in 0..200 {
        let cat = r.random_range(0..12);
        if (1..=10).contains(&cat) {
            kept += 1;
        }
        text += &format!(
            "{},{},{},{},1,{cat},0,0,\n",
            r.random_range(0..900),
            r.random_range(0..500),
            r.random_range(1..90),
            r.random_range(1..90)
        );
    }
    let labels = convert_visdrone(&text, 1000, 600).unwrap();
    assert_eq!(labels.len(), kept);
    assert!(labels.iter().all(|l| l.class_id < 10));
    // every converted label is a valid normalized line
    assert_eq!(parse_normalized(&write_normalized(&labels)).unwrap().len(), kept);
}

/// Recovers rectangles as bounding boxes of same-color connected regions.
fn segment(img: &ImageBuffer) -> Vec<Annotation> {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let c = img.pixel(x0, y0);
            if seen[y0 * w + x0] || c == BACKGROUND {
                continue;
            }
            let class_id = CLASS_COLORS.iter().position(|k| *k == c).expect("known color");
            let (mut x1, mut y1, mut x2, mut y2) = (x0, y0, x0, y0);
            let mut stack = vec![(x0, y0)];
            seen[y0 * w + x0] = true;
            while let Some((x, y)) = stack.pop() {
                (x1, y1, x2, y2) = (x1.min(x), y1.min(y), x2.max(x), y2.max(y));
                let mut push = |nx: usize, ny: usize| {
                    if !seen[ny * w + nx] && img.pixel(nx, ny) == c {
                        seen[ny * w + nx] = true;
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    push(x - 1, y)
                }
                if y > 0 {
                    push(x, y - 1)
                }
                if x + 1 < w {
                    push(x + 1, y)
                }
                if y + 1 < h {
                    push(x, y + 1)
                }
            }
            out.push(Annotation { class_id, bbox: BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64) });
        }
    }
    out
}

fn sort_key(a: &Annotation) -> (usize, i64, i64) {
    (a.class_id, a.bbox.y1 as i64, a.bbox.x1 as i64)
}

#[test]
fn synthetic_labels_match_segmentation() {
    for (img, mut anns) in synth_samples(5, 12, 160).unwrap() {
        assert!((2..=10).contains(&anns.len()));
        for a in &anns {
            let b = a.bbox;
            assert!(b.x1 >= 1.0 && b.y1 >= 1.0 && b.x2 <= 159.0 && b.y2 <= 159.0);
            for s in [b.width(), b.height()] {
                assert!((MIN_SIDE as f64..=MAX_SIDE as f64).contains(&s));
            }
        }
        let mut seg = segment(&img);
        seg.sort_by_key(sort_key);
        anns.sort_by_key(sort_key);
        assert_eq!(write_labels(&seg, 160, 160), write_labels(&anns, 160, 160));
        assert_eq!(seg, anns);
    }
}

#[test]
fn synthetic_dataset_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = write_synth_dataset(7, 4, 128, a.path()).unwrap();
    write_synth_dataset(7, 4, 128, b.path()).unwrap();
    for f in ["manifest.json", "images/0000.ppm", "labels/0003.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(m.items.len(), 4);

    let loaded = Manifest::load(a.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.classes, CLASS_NAMES);
    let mut images = Vec::new();
    for (it, (_, want)) in loaded.items.iter().zip(synth_samples(7, 4, 128).unwrap()) {
        let (img, anns) = load_sample(it).unwrap();
        assert_eq!((img.width, img.height), (128, 128));
        assert_eq!(anns.len(), want.len());
        for (g, w) in anns.iter().zip(&want) {
            assert_eq!(g.class_id, w.class_id);
            assert!((g.bbox.x1 - w.bbox.x1).abs() < 1e-3 && (g.bbox.y2 - w.bbox.y2).abs() < 1e-3);
        }
        let detections =
            anns.iter().map(|a| Detection { class_id: a.class_id, confidence: 1.0, bbox: a.bbox }).collect();
        images.push(ImageResult { detections, ground_truth: anns });
    }
    assert_eq!(evaluate(&images, &CLASS_NAMES, 0.5).unwrap().map, 1.0);

    let empty = tempfile::tempdir().unwrap();
    assert!(write_synth_dataset(1, 0, 128, empty.path()).unwrap().items.is_empty());

    let bad = a.path().join("bad.json");
    std::fs::write(&bad, r#"{"split":"x","classes":["car"],"items":[]}"#).unwrap();
    assert!(matches!(Manifest::load(&bad), Err(Error::Format(_))));
}
