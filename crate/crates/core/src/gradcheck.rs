//! Finite-difference verification of tape gradients in `f64`.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bottleneck, C2psa, ConvBlock, CspBlock, Ctx, DetectHead, DwConvBlock, GhostConv, Sppf};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Dims, Tensor};
use crate::train::{detection_loss, CellTarget, ScaleTargets, TargetAssignment};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// gradients that are zero up to rounding do not dominate.
    pub floor: f64,
    /// Coordinates sampled per input tensor; smaller tensors are checked whole.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { step: 1e-4, tol: 1e-4, floor: 1e-6, samples: 24, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Input name and flat index of the worst coordinate.
    pub worst: String,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: max_rel_error={:.3e} tol={:.0e} checked={} worst={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tol,
            self.checked,
            self.worst
        )
    }
}

/// Compares tape gradients of the scalar `f(inputs)` with finite
/// differences on sampled coordinates of every input.
pub fn check<F>(name: &str, inputs: &[(String, Tensor<f64>)], f: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let mut grads = tape.backward(&loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<f64>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        out.value().item().ok_or_else(|| Error::Contract("gradcheck objective must be scalar".into()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report =
        GradcheckReport { name: name.to_string(), checked: 0, max_rel_error: 0.0, worst: String::new(), tol: cfg.tol };
    for (i, (input_name, t)) in inputs.iter().enumerate() {
        let analytic = grads.take(&vars[i]).unwrap_or_else(|| Tensor::zeros(t.dims()));
        let idx: Vec<usize> = if t.len() <= cfg.samples {
            (0..t.len()).collect()
        } else {
            let mut v = sample(&mut rng, t.len(), cfg.samples).into_vec();
            v.sort_unstable();
            v
        };
        for j in idx {
            let orig = values[i].data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                values[i].data_mut()[j] = orig + offset;
                eval(&values)
            };
            let h = cfg.step;
            // Fourth-order central stencil.
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            values[i].data_mut()[j] = orig;
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = format!("{input_name}[{j}] analytic={a:.6e} numeric={numeric:.6e}");
            }
        }
    }
    Ok(report)
}

pub fn random_tensor(dims: impl Into<Dims>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let dims = dims.into();
    Tensor::new(dims, (0..dims.len()).map(|_| rng.random_range(lo..hi)).collect()).expect("length matches")
}

/// A block forward over a set of inputs, projected to a scalar by fixed
/// random weights.
type BlockFn = Box<dyn Fn(&Ctx<f64>, &[Var<f64>]) -> Result<Vec<Var<f64>>>>;

/// A registered block with randomized parameters and inputs.
pub struct BlockCase {
    pub name: String,
    pub params: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    run: BlockFn,
}

pub const BLOCK_NAMES: [&str; 9] =
    ["conv_block", "dwconv_block", "ghost_conv", "bottleneck", "c2f", "c3k2", "sppf", "c2psa", "detect_head"];

/// Every name accepted by [`check_named`]: the blocks plus the detection loss.
pub const CHECK_NAMES: [&str; 10] =
    ["conv_block", "dwconv_block", "ghost_conv", "bottleneck", "c2f", "c3k2", "sppf", "c2psa", "detect_head", "loss"];

/// Runs the check registered under `name`; `dims` is the block input, or for
/// the loss the stride-8 map size (channel count is ignored).
pub fn check_named(name: &str, dims: Dims, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if name == "loss" {
        loss_check(dims, seed, cfg)
    } else {
        BlockCase::new(name, dims, seed)?.check(cfg)
    }
}

/// Gradient of the detection loss with respect to random raw maps (2 classes,
/// 16 bins), with roughly 40% of cells positive on every scale.
pub fn loss_check(dims: Dims, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    const NC: usize = 2;
    const REG_MAX: usize = 16;
    if dims.h % 4 != 0 || dims.w % 4 != 0 || dims.h == 0 || dims.w == 0 {
        return Err(Error::InvalidParameter(format!("loss maps {dims} must be divisible by 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4 * REG_MAX + NC;
    let inputs: Vec<(String, Tensor<f64>)> = (0..3)
        .map(|s| {
            (format!("map{s}"), random_tensor(Dims::new(dims.n, c, dims.h >> s, dims.w >> s), -2.0, 2.0, &mut rng))
        })
        .collect();
    let targets: Vec<TargetAssignment> = (0..dims.n)
        .map(|_| TargetAssignment {
            scales: (0..3)
                .map(|s| {
                    let mut st = ScaleTargets::empty(8 << s, dims.h >> s, dims.w >> s);
                    for (gt, cell) in st.cells.iter_mut().enumerate() {
                        if rng.random_bool(0.4) {
                            *cell = Some(CellTarget {
                                class_id: rng.random_range(0..NC),
                                dist: std::array::from_fn(|_| rng.random_range(0.01..REG_MAX as f64 - 1.01)),
                                gt,
                            });
                        }
                    }
                    st
                })
                .collect(),
        })
        .collect();
    check("loss", &inputs, |tape, v| Ok(detection_loss(tape, [&v[0], &v[1], &v[2]], &targets, NC, REG_MAX)?.0), cfg)
}

impl BlockCase {
    /// Builds block `name` for an input of `dims`, randomizing every
    /// parameter (including BN affine terms) from `seed`.
    pub fn new(name: &str, dims: Dims, seed: u64) -> Result<Self> {
        let Dims { c, .. } = dims;
        let p = "blk";
        let (specs, run): (Vec<_>, BlockFn) = match name {
            "conv_block" => {
                let b = ConvBlock::new(p, c, c, 3, 1);
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "dwconv_block" => {
                let b = DwConvBlock::new(p, c, c, 5, 1)?;
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "ghost_conv" => {
                let b = GhostConv::new(p, c, c, 3, 2)?;
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "bottleneck" => {
                let b = Bottleneck::new(p, c, c, true, 0.5)?;
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "c2f" => {
                let b = CspBlock::c2f(p, c, c, 1, true, 0.5)?;
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "c3k2" => {
                let b = CspBlock::c3k2(p, c, c, 1, true, 0.5, true)?;
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "sppf" => {
                let b = Sppf::new(p, c, c, 5);
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "c2psa" => {
                let b = C2psa::new(p, c, c, 1)?;
                (b.param_specs(), Box::new(move |ctx, x| Ok(vec![b.forward(ctx, &x[0])?])))
            }
            "detect_head" => {
                let b = DetectHead::new(p, [c, c, c], 2, 16)?;
                (b.param_specs(), Box::new(move |ctx, x| Ok(b.forward(ctx, [&x[0], &x[1], &x[2]])?.to_vec())))
            }
            other => return Err(Error::InvalidParameter(format!("unknown block `{other}`"))),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::from_specs(&specs, &mut rng)?;
        let paths: Vec<String> = params.paths().cloned().collect();
        for path in paths {
            let t = params.tensor_mut(&path)?;
            let (lo, hi) = if path.ends_with("bn.weight") {
                (0.5, 1.5)
            } else if path.ends_with("running_var") {
                (0.5, 1.5)
            } else if path.ends_with("bn.bias") || path.ends_with("running_mean") {
                (-0.5, 0.5)
            } else {
                continue;
            };
            *t = random_tensor(t.dims(), lo, hi, &mut rng);
        }
        let inputs = if name == "detect_head" {
            if dims.h % 4 != 0 || dims.w % 4 != 0 {
                return Err(Error::InvalidParameter(format!("detect_head input {dims} must be divisible by 4")));
            }
            (0..3).map(|s| random_tensor(Dims::new(dims.n, c, dims.h >> s, dims.w >> s), -2.0, 2.0, &mut rng)).collect()
        } else {
            vec![random_tensor(dims, -2.0, 2.0, &mut rng)]
        };
        Ok(BlockCase { name: name.to_string(), params, inputs, run })
    }

    /// Forward in training mode with the given tape and parameter values.
    pub fn forward(&self, ctx: &Ctx<f64>, inputs: &[Var<f64>]) -> Result<Vec<Var<f64>>> {
        (self.run)(ctx, inputs)
    }

    /// Checks gradients with respect to the inputs and every trainable
    /// parameter, with BN in training mode.
    pub fn check(&self, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
        let trainable: Vec<(String, Tensor<f64>)> = self
            .params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, p)| (k.clone(), (*p.value).clone()))
            .collect();
        let n_in = self.inputs.len();
        let mut all: Vec<(String, Tensor<f64>)> =
            self.inputs.iter().enumerate().map(|(i, t)| (format!("input{i}"), t.clone())).collect();
        all.extend(trainable.iter().cloned());

        // Projection weights, fixed per output shape.
        let probe = {
            let tape = Tape::inference();
            let ctx = Ctx::training(&tape, &self.params);
            let xs: Vec<Var<f64>> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
            self.forward(&ctx, &xs)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let weights: Vec<Tensor<f64>> = probe.iter().map(|o| random_tensor(o.dims(), -1.0, 1.0, &mut rng)).collect();

        check(
            &self.name,
            &all,
            |tape, vars| {
                let overrides = trainable.iter().map(|(k, _)| k.clone()).zip(vars[n_in..].iter().cloned()).collect();
                let ctx = Ctx::training(tape, &self.params).with_vars(overrides);
                let outs = self.forward(&ctx, &vars[..n_in])?;
                let mut total: Option<Var<f64>> = None;
                for (o, w) in outs.iter().zip(&weights) {
                    let s = tape.sum(&tape.mul(o, &tape.constant(w.clone()))?);
                    total = Some(match total {
                        None => s,
                        Some(t) => tape.add(&t, &s)?,
                    });
                }
                total.ok_or_else(|| Error::Contract("block produced no outputs".into()))
            },
            cfg,
        )
    }
}
