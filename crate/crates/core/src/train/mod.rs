//! Toy detection trainer: center-cell assignment, a fused composite loss and
//! momentum SGD.

pub mod assign;
pub mod loss;
pub mod sgd;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub use assign::{assign_targets, scale_for, CellTarget, ScaleTargets, TargetAssignment};
pub use loss::{bce, ciou_loss, detection_loss, dfl, evaluate_loss, Dual, LossBreakdown, LossEval, Real};
pub use sgd::Sgd;

use crate::autograd::Tape;
use crate::boxes::LetterboxTransform;
use crate::data::{to_input_tensor, ImageBuffer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Annotation, EvalReport, ImageResult};
use crate::model::Model;
use crate::nn::{Ctx, DetectHead};
use crate::ops::{update_running_stats, BN_MOMENTUM};
use crate::postprocess::{detect, DecodeConfig};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Square input side; a multiple of 32.
    pub image_size: usize,
    /// Train-set evaluation period in steps; 0 disables it.
    pub eval_every: usize,
    /// Stop after an evaluation at or past `min_steps` reaching this mAP.
    pub stop_map: Option<f64>,
    pub min_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 0.01,
            momentum: 0.9,
            image_size: 64,
            eval_every: 100,
            stop_map: None,
            min_steps: 0,
        }
    }
}

/// A full-batch trainer over a fixed set of images.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: Sgd<f32>,
    pub input: Tensor<f32>,
    pub targets: Vec<TargetAssignment>,
    /// Ground truth in input-tensor pixels.
    pub ground_truth: Vec<Vec<Annotation>>,
    pub step: usize,
}

impl Trainer {
    /// Letterboxes every image to `size` and assigns its targets.
    pub fn new(
        model: Model<f32>,
        samples: &[(ImageBuffer, Vec<Annotation>)],
        size: usize,
        lr: f64,
        momentum: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let stride = model.net.max_stride();
        if size == 0 || size % stride != 0 {
            return Err(Error::InvalidParameter(format!("image size {size} is not a positive multiple of {stride}")));
        }
        let reg_max = model.net.detect().reg_max;
        let plane = 3 * size * size;
        let mut data = Vec::with_capacity(samples.len() * plane);
        let mut targets = Vec::with_capacity(samples.len());
        let mut ground_truth = Vec::with_capacity(samples.len());
        for (img, anns) in samples {
            let (t, lb) = to_input_tensor(img, size)?;
            data.extend_from_slice(t.data());
            let gts: Vec<Annotation> = anns
                .iter()
                .map(|a| Annotation { class_id: a.class_id, bbox: lb.forward(&a.bbox) })
                .filter(|a| a.bbox.is_valid())
                .collect();
            targets.push(assign_targets(&gts, size, size, DetectHead::STRIDES, reg_max));
            ground_truth.push(gts);
        }
        let input = Tensor::new(Dims::new(samples.len(), 3, size, size), data)?;
        Ok(Trainer { model, opt: Sgd::new(lr, momentum), input, targets, ground_truth, step: 0 })
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let head = self.model.net.detect();
        let (nc, reg_max) = (head.nc, head.reg_max);
        let (breakdown, grads, stats) = {
            let tape = Tape::new();
            let ctx = Ctx::training(&tape, &self.model.params);
            let x = tape.constant(self.input.clone());
            let [a, b, c] = self.model.net.forward(&ctx, &x)?;
            let (loss, breakdown) = detection_loss(&tape, [&a, &b, &c], &self.targets, nc, reg_max)?;
            drop((a, b, c));
            let mut g = tape.backward(&loss)?;
            let grads: BTreeMap<String, Tensor<f32>> =
                ctx.param_vars().into_iter().filter_map(|(k, v)| g.take(&v).map(|t| (k, t))).collect();
            (breakdown, grads, ctx.take_bn_stats())
        };
        self.opt.step(&mut self.model.params, &grads)?;
        for (prefix, s) in stats {
            let mut rm = self.model.params.tensor(&format!("{prefix}.running_mean"))?.data().to_vec();
            let mut rv = self.model.params.tensor(&format!("{prefix}.running_var"))?.data().to_vec();
            update_running_stats(&mut rm, &mut rv, &s, BN_MOMENTUM as f32);
            self.model.params.tensor_mut(&format!("{prefix}.running_mean"))?.data_mut().copy_from_slice(&rm);
            self.model.params.tensor_mut(&format!("{prefix}.running_var"))?.data_mut().copy_from_slice(&rv);
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Loss of the current parameters with batch-statistics BN, no update.
    pub fn current_loss(&self) -> Result<LossBreakdown> {
        let head = self.model.net.detect();
        let tape = Tape::inference();
        let ctx = Ctx::training(&tape, &self.model.params);
        let [a, b, c] = self.model.net.forward(&ctx, &tape.constant(self.input.clone()))?;
        Ok(evaluate_loss([a.value(), b.value(), c.value()], &self.targets, head.nc, head.reg_max)?.breakdown)
    }

    /// Train-set evaluation at IoU 0.5 in input-tensor coordinates, using
    /// running statistics.
    pub fn evaluate(&self, names: &[&str]) -> Result<EvalReport> {
        let raw = self.model.forward(&self.input)?;
        let size = self.input.dims().h;
        let lb = LetterboxTransform::new(size, size, size)?;
        let images: Vec<ImageResult> = self
            .ground_truth
            .iter()
            .enumerate()
            .map(|(i, gts)| ImageResult {
                detections: detect(&raw, i, &DecodeConfig::EVAL, &lb),
                ground_truth: gts.clone(),
            })
            .collect();
        evaluate(&images, names, 0.5)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, loss)`; step 1 is the loss of the initial parameters.
    pub losses: Vec<(usize, LossBreakdown)>,
    /// `(step, mAP@0.5)` after that many updates.
    pub evals: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,box,cls,dfl,total\n");
        for (step, l) in &self.losses {
            let _ = writeln!(s, "{step},{},{},{},{}", l.box_loss, l.cls_loss, l.dfl_loss, l.total);
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,map50\n");
        for (step, m) in &self.evals {
            let _ = writeln!(s, "{step},{m}");
        }
        s
    }

    pub fn loss_at(&self, step: usize) -> Option<&LossBreakdown> {
        self.losses.iter().find(|(s, _)| *s == step).map(|(_, l)| l)
    }

    pub fn best_map(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.1).reduce(f64::max)
    }
}

/// Runs `cfg.steps` updates, evaluating periodically and after the last step.
/// `progress` sees every logged step. With `out`, writes `loss.csv`,
/// `eval.csv` and `weights.ghwt` there.
pub fn train_loop(
    model: Model<f32>,
    samples: &[(ImageBuffer, Vec<Annotation>)],
    names: &[&str],
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(usize, &LossBreakdown, Option<f64>),
) -> Result<(Model<f32>, TrainLog)> {
    let mut trainer = Trainer::new(model, samples, cfg.image_size, cfg.lr, cfg.momentum)?;
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let l = trainer.step()?;
        log.losses.push((step, l));
        let mut map = None;
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps {
            let m = trainer.evaluate(names)?.map;
            log.evals.push((step, m));
            map = Some(m);
        }
        progress(step, &l, map);
        if let (Some(m), Some(goal)) = (map, cfg.stop_map) {
            if step >= cfg.min_steps && m >= goal {
                break;
            }
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("loss.csv"), log.to_csv())?;
        std::fs::write(dir.join("eval.csv"), log.evals_csv())?;
        trainer.model.save_weights(dir.join("weights.ghwt"))?;
    }
    Ok((trainer.model, log))
}
