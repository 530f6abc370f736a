use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ghosthead::data::{
    load_sample, synth_samples, to_input_tensor, write_synth_dataset, ImageBuffer, Manifest, ManifestItem,
    CLASS_COLORS, CLASS_NAMES,
};
use ghosthead::gradcheck::{check_named, GradcheckConfig, CHECK_NAMES};
use ghosthead::metrics::{evaluate, ImageResult};
use ghosthead::model::{Model, ModelConfig, Network, Variant};
use ghosthead::postprocess::{detect, format_detections, DecodeConfig, Detection};
use ghosthead::train::{train_loop, TrainConfig};
use ghosthead::{Dims, Error, Tensor};
use rayon::prelude::*;

use crate::{BenchVariant, CliError, CliResult, ModelArgs};

fn load_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    Ok(match path {
        Some(p) => ModelConfig::parse(&std::fs::read_to_string(p).map_err(Error::from)?)?,
        None => ModelConfig::yolo11n(),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    std::fs::write(path, contents).map_err(Error::from)?;
    Ok(())
}

fn class_names(nc: usize) -> Vec<String> {
    if nc == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..nc).map(|i| format!("class{i}")).collect()
    }
}

pub fn summary(model: &ModelArgs, size: usize, csv: Option<&Path>) -> CliResult {
    let config = load_config(model.config.as_deref())?;
    let ledger = Network::build(&config, model.variant.into())?.ledger(size, size)?;
    print!("{}", ledger.summary());
    if let Some(p) = csv {
        write_file(p, ledger.to_csv())?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn init(model: &ModelArgs, seed: u64, out: &Path) -> CliResult {
    let config = load_config(model.config.as_deref())?;
    let m = Model::<f32>::init(Network::build(&config, model.variant.into())?, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    m.save_weights(out)?;
    println!("wrote {} ({} parameters)", out.display(), m.count_params());
    Ok(())
}

fn run_detector(m: &Model<f32>, img: &ImageBuffer, size: usize, cfg: &DecodeConfig) -> CliResult<Vec<Detection>> {
    let (x, lb) = to_input_tensor(img, size)?;
    let raw = m.forward(&x)?;
    Ok(detect(&raw, 0, cfg, &lb))
}

#[allow(clippy::too_many_arguments)]
pub fn infer(
    weights: &Path,
    image: &Path,
    config: Option<&Path>,
    conf: f64,
    iou: f64,
    size: usize,
    out: &Path,
    overlay: Option<&Path>,
) -> CliResult {
    let cfg = DecodeConfig::INTERACTIVE.with_thresholds(conf, iou)?;
    let m = Model::load_any_variant(&load_config(config)?, weights)?;
    let img = ImageBuffer::load_ppm(image)?;
    let dets = run_detector(&m, &img, size, &cfg)?;
    let names = class_names(m.net.detect().nc);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_file(out, format_detections(&id, &dets, &names))?;
    println!("wrote {} detections to {}", dets.len(), out.display());
    if let Some(p) = overlay {
        let mut canvas = img.clone();
        for d in &dets {
            canvas.draw_box(&d.bbox, CLASS_COLORS[d.class_id % CLASS_COLORS.len()]);
        }
        write_file(p, canvas.encode_ppm())?;
        println!("wrote overlay {}", p.display());
    }
    Ok(())
}

pub enum EvalSource {
    Weights(PathBuf),
    GroundTruth,
}

pub fn eval(
    source: EvalSource,
    manifest: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    conf: f64,
    iou: f64,
    size: usize,
) -> CliResult {
    let cfg = DecodeConfig::EVAL.with_thresholds(conf, iou)?;
    let manifest = Manifest::load(manifest)?;
    if manifest.items.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let model = match &source {
        EvalSource::Weights(w) => Some(Model::load_any_variant(&load_config(config)?, w)?),
        EvalSource::GroundTruth => None,
    };
    let images: Vec<ImageResult> = manifest
        .items
        .par_iter()
        .map(|item| -> CliResult<ImageResult> {
            let (img, ground_truth) = load_sample(item)?;
            let detections = match &model {
                Some(m) => run_detector(m, &img, size, &cfg)?,
                None => ground_truth
                    .iter()
                    .map(|a| Detection { class_id: a.class_id, confidence: 1.0, bbox: a.bbox })
                    .collect(),
            };
            Ok(ImageResult { detections, ground_truth })
        })
        .collect::<CliResult<_>>()?;
    let report = evaluate(&images, &CLASS_NAMES, 0.5)?;
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    let table = report.table();
    write_file(&out_dir.join("table.txt"), &table)?;
    write_file(&out_dir.join("table.csv"), report.table_csv())?;
    write_file(&out_dir.join("curves.csv"), report.curves_csv())?;
    print!("{table}");
    Ok(())
}

struct BenchStats {
    gflops: f64,
    params: usize,
    samples_ms: Vec<f64>,
}

impl BenchStats {
    fn mean(&self) -> f64 {
        self.samples_ms.iter().sum::<f64>() / self.samples_ms.len() as f64
    }

    /// Nearest-rank percentile.
    fn percentile(&self, q: f64) -> f64 {
        let mut s = self.samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
        s[rank - 1]
    }

    fn median(&self) -> f64 {
        let mut s = self.samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        }
    }
}

fn bench_one(
    config: &ModelConfig,
    variant: Variant,
    iters: usize,
    warmup: usize,
    size: usize,
) -> CliResult<BenchStats> {
    let net = Network::build(config, variant)?;
    let gflops = net.ledger(size, size)?.gflops();
    let m = Model::<f32>::init(net, 0)?;
    let x = Tensor::full(Dims::new(1, 3, size, size), 114.0f32 / 255.0);
    for _ in 0..warmup {
        m.forward(&x)?;
    }
    let mut samples_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        m.forward(&x)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchStats { gflops, params: m.count_params(), samples_ms })
}

pub fn bench(config: Option<&Path>, variant: BenchVariant, iters: usize, warmup: usize, size: usize) -> CliResult {
    if iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let config = load_config(config)?;
    let variants: &[Variant] = match variant {
        BenchVariant::Baseline => &[Variant::Baseline],
        BenchVariant::Ghosthead => &[Variant::Ghosthead],
        BenchVariant::Both => &Variant::ALL,
    };
    println!("protocol: batch 1, {size}x{size}, {warmup} warmup + {iters} timed forward passes, wall clock");
    let mut all = Vec::new();
    for &v in variants {
        let s = bench_one(&config, v, iters, warmup, size)?;
        let samples: Vec<String> = s.samples_ms.iter().map(|t| format!("{t:.3}")).collect();
        println!(
            "{v}: gflops={:.2} params={} mean_ms={:.3} median_ms={:.3} p95_ms={:.3} samples_ms={}",
            s.gflops,
            s.params,
            s.mean(),
            s.median(),
            s.percentile(0.95),
            samples.join(",")
        );
        all.push(s);
    }
    if let [b, g] = &all[..] {
        println!("ratio ghosthead/baseline: gflops={:.4} mean_latency={:.4}", g.gflops / b.gflops, g.mean() / b.mean());
    }
    Ok(())
}

pub fn gradcheck(block: Option<&str>, all: bool, tol: f64, seed: u64) -> CliResult {
    let names: Vec<&str> = if all { CHECK_NAMES.to_vec() } else { vec![block.expect("required by clap")] };
    let cfg = GradcheckConfig { tol, ..Default::default() };
    let mut failed = Vec::new();
    for name in names {
        let r = check_named(name, Dims::new(1, 8, 8, 8), seed, &cfg)?;
        println!("{r}");
        if !r.passed() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train_toy(
    seed: u64,
    steps: usize,
    out: &Path,
    n: usize,
    size: usize,
    variant: Variant,
    lr: f64,
    eval_every: usize,
) -> CliResult {
    let samples = synth_samples(seed, n, size)?;
    let model = Model::init(Network::build(&ModelConfig::yolo11n(), variant)?, seed)?;
    let cfg = TrainConfig { steps, lr, image_size: size, eval_every, ..Default::default() };
    let mut first = None;
    let (_, log) = train_loop(model, &samples, &CLASS_NAMES, &cfg, Some(out), |step, l, map| {
        first.get_or_insert(l.total);
        if let Some(m) = map {
            println!(
                "step {step}: box={:.4} cls={:.4} dfl={:.4} total={:.4} map50={m:.4}",
                l.box_loss, l.cls_loss, l.dfl_loss, l.total
            );
        }
    })?;
    let mut s = String::new();
    if let (Some(f), Some((_, last))) = (first, log.losses.last()) {
        let _ = write!(s, "loss {f:.4} -> {:.4}", last.total);
    }
    if let Some(m) = log.best_map() {
        let _ = write!(s, ", best map50 {m:.4}");
    }
    println!("{s}");
    for f in ["loss.csv", "eval.csv", "weights.ghwt"] {
        println!("wrote {}", out.join(f).display());
    }
    Ok(())
}

pub fn convert_visdrone(input: &Path, out: &Path) -> CliResult {
    let ann_dir = input.join("annotations");
    let mut stems: Vec<String> = std::fs::read_dir(&ann_dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    std::fs::create_dir_all(out.join("images")).map_err(Error::from)?;
    std::fs::create_dir_all(out.join("labels")).map_err(Error::from)?;
    let mut items = Vec::with_capacity(stems.len());
    let mut boxes = 0;
    for stem in &stems {
        let bytes = std::fs::read(input.join("images").join(format!("{stem}.ppm"))).map_err(Error::from)?;
        let img = ImageBuffer::decode_ppm(&bytes)?;
        let text = std::fs::read_to_string(ann_dir.join(format!("{stem}.txt"))).map_err(Error::from)?;
        let labels = ghosthead::data::convert_visdrone(&text, img.width, img.height)?;
        boxes += labels.len();
        let item =
            ManifestItem { image: format!("images/{stem}.ppm").into(), label: format!("labels/{stem}.txt").into() };
        write_file(&out.join(&item.image), &bytes)?;
        write_file(&out.join(&item.label), ghosthead::data::write_normalized(&labels))?;
        items.push(item);
    }
    let path = out.join("manifest.json");
    Manifest::new("converted", items).save(&path)?;
    println!("converted {} images, {boxes} boxes; wrote {}", stems.len(), path.display());
    Ok(())
}

pub fn synth(seed: u64, n: usize, size: usize, out: &Path) -> CliResult {
    let m = write_synth_dataset(seed, n, size, out)?;
    println!("wrote {} images; {}", m.items.len(), out.join("manifest.json").display());
    Ok(())
}
