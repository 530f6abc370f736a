//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use ghosthead::boxes::{iou, BBox, LetterboxTransform};
use ghosthead::data::{synth_samples, CLASS_NAMES};
use ghosthead::gradcheck::{check_named, GradcheckConfig, CHECK_NAMES};
use ghosthead::metrics::{average_precision, evaluate, f1, mean_ap, ImageResult, PrCurve};
use ghosthead::model::{Layer, Model, ModelConfig, Network, Variant};
use ghosthead::nn::{CspBlock, Ctx, Sppf};
use ghosthead::ops::{self, Conv2dParams};
use ghosthead::params::{ParamSpec, ParamStore};
use ghosthead::postprocess::{nms, Detection};
use ghosthead::train::{train_loop, TrainConfig};
use ghosthead::{Dims, Tape};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn net(v: Variant) -> Network {
    Network::build(&ModelConfig::yolo11n(), v).unwrap()
}

fn store(specs: &[ParamSpec], seed: u64) -> ParamStore<f32> {
    let mut r = rng(seed);
    let mut s = ParamStore::from_specs(specs, &mut r).unwrap();
    randomize_bn(&mut s, &mut r);
    s
}

fn metric_formulas() -> Outcome {
    let rows = [(40.0, 31.5, 35.2), (39.6, 30.9, 34.7), (41.2, 30.6, 35.1), (41.0, 30.0, 34.6), (40.6, 30.2, 34.6)];
    let mut worst: f64 = 0.0;
    for (p, r, want) in rows {
        let got = f1(p, r);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 0.05, || format!("f1({p}, {r}) = {got:.3}, want {want}"))?;
    }
    let aps = [31.9, 25.3, 6.5, 73.9, 35.9, 25.1, 17.6, 10.2, 44.3, 33.2];
    let m = mean_ap(&aps).map_err(|e| e.to_string())?;
    ensure((m - 30.4).abs() <= 0.05, || format!("mAP {m:.3}, want 30.4"))?;
    Ok(format!("worst f1 deviation {worst:.3}, mAP {m:.2}"))
}

fn gflops() -> Outcome {
    let base = net(Variant::Baseline).ledger(640, 640).map_err(|e| e.to_string())?;
    let ghost = net(Variant::Ghosthead).ledger(640, 640).map_err(|e| e.to_string())?;
    let (b, g) = (base.gflops(), ghost.gflops());
    ensure((b - 6.6).abs() <= 0.15 * 6.6, || format!("baseline {b:.3} GFLOPs outside 6.6 ±15%"))?;
    ensure((g - 6.7).abs() <= 0.15 * 6.7, || format!("ghosthead {g:.3} GFLOPs outside 6.7 ±15%"))?;
    ensure(base.rows[..11] == ghost.rows[..11], || "backbone ledger rows differ".into())?;
    Ok(format!("baseline {b:.2} GFLOPs, ghosthead {g:.2} GFLOPs, backbone rows identical"))
}

fn ghost_macs() -> Outcome {
    let base = net(Variant::Baseline);
    let ghost = net(Variant::Ghosthead);
    let ledger = base.ledger(640, 640).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for i in [17, 20] {
        let (h, w) = ledger.rows[i - 1].out_hw[0];
        let (Layer::Conv(conv), Layer::Ghost(g)) = (&base.nodes[i].layer, &ghost.nodes[i].layer) else {
            return Err(format!("layer {i} is not a conv/ghost pair"));
        };
        let c = conv.macs(h, w);
        let gm = g.macs(h, w);
        let dense = g.primary.macs(h, w);
        ensure(gm < c, || format!("layer {i}: ghost {gm} MACs not below conv {c}"))?;
        ensure(2 * dense == c, || format!("layer {i}: dense half {dense} MACs, conv {c}"))?;
        parts.push(format!("c={} ghost {gm} < conv {c}, dense {dense} = conv/2", conv.c_in));
    }
    Ok(parts.join("; "))
}

fn block_equivalences() -> Outcome {
    let b = Sppf::new("s", 8, 6, 5);
    let s = store(&b.param_specs(), 7);
    let tape = Tape::inference();
    let ctx = Ctx::inference(&tape, &s);
    for trial in 0..100u64 {
        let mut r = rng(1000 + trial);
        let (h, w) = (r.random_range(1..16), r.random_range(1..16));
        let x = tape.constant(rand_tensor::<f32>((1, 8, h, w), -3.0, 3.0, &mut r));
        let fast = b.forward(&ctx, &x).map_err(|e| e.to_string())?;
        let h0 = b.cv1.forward(&ctx, &x).map_err(|e| e.to_string())?;
        let pools: Vec<_> =
            [5, 9, 13].iter().map(|&k| tape.constant(ops::maxpool2d(h0.value(), k, 1, k / 2).unwrap())).collect();
        let cat = tape.concat(&[&h0, &pools[0], &pools[1], &pools[2]], 1).map_err(|e| e.to_string())?;
        let spp = b.cv2.forward(&ctx, &cat).map_err(|e| e.to_string())?;
        ensure(fast.value() == spp.value(), || format!("SPPF differs from SPP on trial {trial} ({h}×{w})"))?;
    }

    let plain = CspBlock::c3k2("c", 6, 8, 2, false, 0.5, true).map_err(|e| e.to_string())?;
    let c2f = CspBlock::c2f("c", 6, 8, 2, true, 0.5).map_err(|e| e.to_string())?;
    ensure(plain.param_specs() == c2f.param_specs(), || "c3k2/c2f parameter layouts differ".into())?;
    let s = store(&plain.param_specs(), 13);
    let ctx = Ctx::inference(&tape, &s);
    for trial in 0..20u64 {
        let x = tape.constant(rand_tensor::<f32>((2, 6, 7, 5), -2.0, 2.0, &mut rng(trial)));
        let a = plain.forward(&ctx, &x).map_err(|e| e.to_string())?;
        let b = c2f.forward(&ctx, &x).map_err(|e| e.to_string())?;
        ensure(a.value() == b.value(), || format!("c3k2(false) differs from c2f on trial {trial}"))?;
    }
    Ok("SPPF == SPP{5,9,13} on 100 inputs, c3k2(false) == c2f bitwise".into())
}

fn gradients() -> Outcome {
    let cfg = GradcheckConfig { tol: 1e-4, ..Default::default() };
    let mut worst: f64 = 0.0;
    for name in CHECK_NAMES {
        let r = check_named(name, Dims::new(1, 8, 8, 8), 1, &cfg).map_err(|e| e.to_string())?;
        ensure(r.passed(), || format!("{r}"))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("{} checks, max relative error {worst:.2e}", CHECK_NAMES.len()))
}

/// Per class, repeatedly keep the best remaining box and strike its overlaps.
fn oracle_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    while let Some(i) = (0..dets.len()).filter(|&i| alive[i]).reduce(|j, i| {
        let (a, b) = (&dets[i], &dets[j]);
        if a.confidence > b.confidence || (a.confidence == b.confidence && a.class_id < b.class_id) {
            i
        } else {
            j
        }
    }) {
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

/// Area under the precision envelope, one recall step per true positive.
fn oracle_ap(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut prec = Vec::new();
    let mut tp = 0;
    for (rank, &i) in order.iter().enumerate() {
        tp += scored[i].1 as usize;
        prec.push((tp as f64 / (rank + 1) as f64, scored[i].1));
    }
    let mut ap = 0.0;
    for k in 0..prec.len() {
        if prec[k].1 {
            ap += prec[k..].iter().map(|p| p.0).fold(0.0, f64::max) / n_gt as f64;
        }
    }
    ap
}

fn primitives() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (groups, cig, cog) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let (k, s) = (r.random_range(1..6), r.random_range(1..4));
        let p = r.random_range(0..3);
        let (h, w) = (r.random_range(k..k + 8), r.random_range(k..k + 8));
        let x = rand_tensor::<f32>((2, groups * cig, h, w), -1.0, 1.0, &mut r);
        let wt = rand_tensor::<f32>((groups * cog, cig, k, k), -1.0, 1.0, &mut r);
        let b = rand_tensor::<f32>((groups * cog, 1, 1, 1), -1.0, 1.0, &mut r);
        let y = ops::conv2d(&x, &wt, Some(b.data()), Conv2dParams::new(s, p, groups)).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&y, &naive_conv(&x, &wt, Some(b.data()), s, p, groups));
        worst = worst.max(d);
        ensure(d <= 1e-5, || format!("conv2d off by {d:e}"))?;

        let c = r.random_range(1..6);
        let kd = if r.random_bool(0.5) { 3 } else { 5 };
        let x = rand_tensor::<f32>((2, c, h.max(2), w.max(2)), -1.0, 1.0, &mut r);
        let wt = rand_tensor::<f32>((c, 1, kd, kd), -1.0, 1.0, &mut r);
        let y = ops::conv2d(&x, &wt, None, Conv2dParams::new(s.min(2), kd / 2, c)).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&y, &naive_conv(&x, &wt, None, s.min(2), kd / 2, c));
        worst = worst.max(d);
        ensure(d <= 1e-5, || format!("depthwise conv off by {d:e}"))?;

        let pp = p.min(k / 2);
        let y = ops::maxpool2d(&x, k, s, pp).ok();
        if h.max(2) + 2 * pp >= k && w.max(2) + 2 * pp >= k {
            let y = y.ok_or("maxpool rejected a valid shape")?;
            let d = max_abs_diff(&y, &naive_maxpool(&x, k, s, pp));
            ensure(d == 0.0, || format!("maxpool off by {d:e}"))?;
        }
    }

    for trial in 0..1000 {
        let n = r.random_range(0..25);
        let dets: Vec<Detection> = (0..n)
            .map(|i| {
                let (x, y) = (r.random_range(0.0..30.0), r.random_range(0.0..30.0));
                let bbox = BBox::new(x, y, x + r.random_range(2.0..15.0), y + r.random_range(2.0..15.0));
                Detection { class_id: r.random_range(0..3), confidence: 0.01 + i as f64 / 30.0, bbox }
            })
            .collect();
        let thr = r.random_range(0.1..0.9);
        ensure(nms(&dets, thr) == oracle_nms(&dets, thr), || format!("NMS differs from brute force on trial {trial}"))?;

        let m = r.random_range(1..30);
        let scored: Vec<(f64, bool)> = (0..m).map(|_| (r.random_range(0.0..1.0), r.random_bool(0.5))).collect();
        let n_gt = scored.iter().filter(|s| s.1).count() + r.random_range(0..5);
        let (got, want) = (average_precision(&PrCurve::from_scored(&scored, n_gt)), oracle_ap(&scored, n_gt));
        ensure((got - want).abs() <= 1e-9, || format!("AP {got} vs brute force {want} on trial {trial}"))?;
    }

    let hand = average_precision(&PrCurve::from_scored(&[(0.9, true), (0.8, false), (0.7, true)], 2));
    ensure((hand - 0.8333).abs() <= 1e-4 && (hand - 5.0 / 6.0).abs() <= 1e-6, || format!("hand AP {hand}"))?;
    Ok(format!("conv max error {worst:.1e}, NMS and AP match brute force on 1000 trials, hand AP {hand:.4}"))
}

fn toy_training() -> Outcome {
    let size = 128;
    let samples = synth_samples(0, 8, size).map_err(|e| e.to_string())?;
    let model = Model::init(net(Variant::Ghosthead), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 2000,
        image_size: size,
        eval_every: 100,
        stop_map: Some(0.5),
        min_steps: 500,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (_, log) = train_loop(model, &samples, &CLASS_NAMES, &cfg, None, |_, _, _| {}).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let first = log.loss_at(1).ok_or("no loss at step 1")?.total;
    let at500 = log.loss_at(500).ok_or("training stopped before step 500")?.total;
    let reached = log.evals.iter().find(|e| e.1 >= 0.5).map(|e| e.0);
    let best = log.best_map().unwrap_or(0.0);
    ensure(at500 <= 0.5 * first, || format!("loss {first:.3} -> {at500:.3} at step 500, above half"))?;
    ensure(reached.is_some(), || format!("best mAP@0.5 {best:.3} within 2000 steps"))?;
    Ok(format!(
        "loss {first:.3} -> {at500:.3} at step 500, mAP@0.5 {best:.3} at step {}, {secs:.0} s",
        reached.unwrap()
    ))
}

fn pipeline_identity() -> Outcome {
    let samples = synth_samples(3, 8, 640).map_err(|e| e.to_string())?;
    let images: Vec<ImageResult> = samples
        .iter()
        .map(|(_, anns)| ImageResult {
            detections: anns
                .iter()
                .map(|a| Detection { class_id: a.class_id, confidence: 1.0, bbox: a.bbox })
                .collect(),
            ground_truth: anns.clone(),
        })
        .collect();
    let map = evaluate(&images, &CLASS_NAMES, 0.5).map_err(|e| e.to_string())?.map;
    ensure(map == 1.0, || format!("ground truth as detections gives mAP {map}"))?;

    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (w, h) = (r.random_range(1..2000), r.random_range(1..2000));
        let lb = LetterboxTransform::new(w, h, 640).map_err(|e| e.to_string())?;
        let (x, y) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
        let b = BBox::new(x, y, x + r.random_range(0.0..50.0), y + r.random_range(0.0..50.0));
        let back = lb.inverse(&lb.forward(&b));
        for d in [back.x1 - b.x1, back.y1 - b.y1, back.x2 - b.x2, back.y2 - b.y2] {
            worst = worst.max(d.abs());
        }
    }
    ensure(worst <= 1e-6, || format!("letterbox round trip off by {worst:e}"))?;
    Ok(format!("GT-as-detections mAP {map}, letterbox round trip max error {worst:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("F1 and mAP formulas reproduce the reference table", metric_formulas),
        ("GFLOPs at 640 within 15% of the reference values", gflops),
        ("GhostConv costs less than the conv it replaces", ghost_macs),
        ("SPPF equals SPP and C3k2 without C3k equals C2f", block_equivalences),
        ("analytic gradients match finite differences", gradients),
        ("primitives, NMS and AP match brute force", primitives),
        ("toy training learns", toy_training),
        ("evaluation pipeline identity and letterbox round trip", pipeline_identity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
