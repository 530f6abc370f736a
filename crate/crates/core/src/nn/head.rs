use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::ParamSpec;
use crate::tensor::Scalar;

use super::{Conv2dLayer, ConvBlock, Ctx};

/// Class-logit bias so that initial sigmoid scores sit near this prior.
pub const CLASS_PRIOR: f64 = 0.01;
pub const BOX_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
struct ScaleBranches {
    box_convs: [ConvBlock; 2],
    box_out: Conv2dLayer,
    cls_convs: [ConvBlock; 4],
    cls_out: Conv2dLayer,
}

/// Decoupled three-scale head producing `4·reg_max + nc` raw channels per
/// scale: box distribution logits first, then class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectHead {
    pub nc: usize,
    pub reg_max: usize,
    pub in_channels: [usize; 3],
    scales: Vec<ScaleBranches>,
}

impl DetectHead {
    pub const STRIDES: [usize; 3] = [8, 16, 32];

    pub fn new(prefix: &str, in_channels: [usize; 3], nc: usize, reg_max: usize) -> Result<Self> {
        if nc == 0 || reg_max < 2 {
            return Err(Error::config(format!("detect head needs nc ≥ 1 and reg_max ≥ 2, got {nc}, {reg_max}")));
        }
        let c2 = 16.max(in_channels[0] / 4).max(4 * reg_max);
        let c3 = in_channels[0].max(nc.min(100));
        let cls_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let scales = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = format!("{prefix}.box.{i}");
                let k = format!("{prefix}.cls.{i}");
                ScaleBranches {
                    box_convs: [
                        ConvBlock::new(format!("{b}.0"), c, c2, 3, 1),
                        ConvBlock::new(format!("{b}.1"), c2, c2, 3, 1),
                    ],
                    box_out: Conv2dLayer::new(format!("{b}.2"), c2, 4 * reg_max, 1, BOX_BIAS),
                    cls_convs: [
                        ConvBlock::new(format!("{k}.0"), c, c, 3, 1).grouped(c),
                        ConvBlock::new(format!("{k}.1"), c, c3, 1, 1),
                        ConvBlock::new(format!("{k}.2"), c3, c3, 3, 1).grouped(c3),
                        ConvBlock::new(format!("{k}.3"), c3, c3, 1, 1),
                    ],
                    cls_out: Conv2dLayer::new(format!("{k}.4"), c3, nc, 1, cls_bias),
                }
            })
            .collect();
        Ok(DetectHead { nc, reg_max, in_channels, scales })
    }

    pub fn out_channels(&self) -> usize {
        4 * self.reg_max + self.nc
    }

    /// Path of the final box convolution of scale `i`.
    pub fn box_out_prefix(&self, i: usize) -> &str {
        &self.scales[i].box_out.prefix
    }

    pub fn cls_out_prefix(&self, i: usize) -> &str {
        &self.scales[i].cls_out.prefix
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        for s in &self.scales {
            for c in &s.box_convs {
                v.extend(c.param_specs());
            }
            v.extend(s.box_out.param_specs());
            for c in &s.cls_convs {
                v.extend(c.param_specs());
            }
            v.extend(s.cls_out.param_specs());
        }
        v
    }

    pub fn macs(&self, sizes: [(usize, usize); 3]) -> u64 {
        self.scales
            .iter()
            .zip(sizes)
            .map(|(s, (h, w))| {
                s.box_convs.iter().chain(&s.cls_convs).map(|c| c.macs(h, w)).sum::<u64>()
                    + s.box_out.macs(h, w)
                    + s.cls_out.macs(h, w)
            })
            .sum()
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, inputs: [&Var<T>; 3]) -> Result<[Var<T>; 3]> {
        let d: Vec<_> = inputs.iter().map(|v| v.dims()).collect();
        let ratios_ok = d[0].h == 2 * d[1].h && d[1].h == 2 * d[2].h && d[0].w == 2 * d[1].w && d[1].w == 2 * d[2].w;
        if !ratios_ok || d[2].h == 0 || d[2].w == 0 {
            return Err(Error::config(format!(
                "detect inputs must be at strides 8/16/32, got {} / {} / {}",
                d[0], d[1], d[2]
            )));
        }
        let tape = ctx.tape();
        let mut outs = Vec::with_capacity(3);
        for (s, x) in self.scales.iter().zip(inputs) {
            let mut b = x.clone();
            for c in &s.box_convs {
                b = c.forward(ctx, &b)?;
            }
            let b = s.box_out.forward(ctx, &b)?;
            let mut k = x.clone();
            for c in &s.cls_convs {
                k = c.forward(ctx, &k)?;
            }
            let k = s.cls_out.forward(ctx, &k)?;
            outs.push(tape.concat(&[&b, &k], 1)?);
        }
        let [a, b, c]: [Var<T>; 3] = outs.try_into().expect("three scales");
        Ok([a, b, c])
    }
}
