use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::Conv2dParams;
use crate::params::{Init, ParamSpec};
use crate::tensor::Scalar;

use super::{conv_macs, Ctx};

fn same_out(n: usize, k: usize, s: usize) -> usize {
    (n + 2 * (k / 2) - k) / s + 1
}

/// Convolution (no bias), batch norm, then SiLU unless `act` is off.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub act: bool,
}

impl ConvBlock {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvBlock { prefix: prefix.into(), c_in, c_out, k, stride, groups: 1, act: true }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn linear(mut self) -> Self {
        self.act = false;
        self
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let p = &self.prefix;
        let cg = self.c_in / self.groups;
        let c = self.c_out;
        vec![
            ParamSpec::trainable(
                format!("{p}.conv.weight"),
                vec![c, cg, self.k, self.k],
                Init::KaimingUniform { fan_in: cg * self.k * self.k },
            ),
            ParamSpec::trainable(format!("{p}.bn.weight"), vec![c], Init::Const(1.0)),
            ParamSpec::trainable(format!("{p}.bn.bias"), vec![c], Init::Const(0.0)),
            ParamSpec::buffer(format!("{p}.bn.running_mean"), vec![c], 0.0),
            ParamSpec::buffer(format!("{p}.bn.running_var"), vec![c], 1.0),
        ]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (same_out(h, self.k, self.stride), same_out(w, self.k, self.stride))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        conv_macs(self.c_in, self.c_out, self.k, self.groups, ho, wo)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let p = &self.prefix;
        let w = ctx.param(&format!("{p}.conv.weight"))?;
        let params = Conv2dParams::new(self.stride, self.k / 2, self.groups);
        let y = ctx.tape().conv2d(x, &w, None, params)?;
        let y = ctx.batchnorm(&format!("{p}.bn"), &y)?;
        Ok(if self.act { ctx.tape().silu(&y) } else { y })
    }
}

/// Plain convolution with bias and no activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub bias_init: f64,
}

impl Conv2dLayer {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, k: usize, bias_init: f64) -> Self {
        Conv2dLayer { prefix: prefix.into(), c_in, c_out, k, bias_init }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let fan_in = self.c_in * self.k * self.k;
        vec![
            ParamSpec::trainable(
                format!("{}.weight", self.prefix),
                vec![self.c_out, self.c_in, self.k, self.k],
                Init::KaimingUniform { fan_in },
            ),
            ParamSpec::trainable(format!("{}.bias", self.prefix), vec![self.c_out], Init::Const(self.bias_init)),
        ]
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        conv_macs(self.c_in, self.c_out, self.k, 1, h, w)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&format!("{}.weight", self.prefix))?;
        let b = ctx.param(&format!("{}.bias", self.prefix))?;
        ctx.tape().conv2d(x, &w, Some(&b), Conv2dParams::new(1, self.k / 2, 1))
    }
}

/// Depthwise convolution with bias followed by SiLU, without batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct DwConvBlock {
    pub prefix: String,
    pub channels: usize,
    pub k: usize,
    pub stride: usize,
}

impl DwConvBlock {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        if c_in != c_out {
            return Err(Error::config(format!("depthwise conv needs c_in == c_out, got {c_in} and {c_out}")));
        }
        Ok(DwConvBlock { prefix: prefix.into(), channels: c_in, k, stride })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let kk = self.k * self.k;
        vec![
            ParamSpec::trainable(
                format!("{}.weight", self.prefix),
                vec![self.channels, 1, self.k, self.k],
                Init::KaimingUniform { fan_in: kk },
            ),
            ParamSpec::trainable(
                format!("{}.bias", self.prefix),
                vec![self.channels],
                Init::KaimingUniform { fan_in: kk },
            ),
        ]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (same_out(h, self.k, self.stride), same_out(w, self.k, self.stride))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        conv_macs(self.channels, self.channels, self.k, self.channels, ho, wo)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&format!("{}.weight", self.prefix))?;
        let b = ctx.param(&format!("{}.bias", self.prefix))?;
        let params = Conv2dParams::new(self.stride, self.k / 2, self.channels);
        let y = ctx.tape().conv2d(x, &w, Some(&b), params)?;
        Ok(ctx.tape().silu(&y))
    }
}

/// Half the output channels from a regular conv block, the other half from
/// a 5×5 depthwise pass over that result.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostConv {
    pub primary: ConvBlock,
    pub cheap: DwConvBlock,
}

impl GhostConv {
    pub const CHEAP_KERNEL: usize = 5;

    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::config(format!("ghost conv needs an even output width, got {c_out}")));
        }
        let half = c_out / 2;
        Ok(GhostConv {
            primary: ConvBlock::new(format!("{prefix}.primary"), c_in, half, k, stride),
            cheap: DwConvBlock::new(format!("{prefix}.cheap"), half, half, Self::CHEAP_KERNEL, 1)?,
        })
    }

    pub fn c_out(&self) -> usize {
        2 * self.primary.c_out
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.primary.param_specs();
        v.extend(self.cheap.param_specs());
        v
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.primary.out_hw(h, w)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        self.primary.macs(h, w) + self.cheap.macs(ho, wo)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.primary.forward(ctx, x)?;
        let z = self.cheap.forward(ctx, &y)?;
        ctx.tape().concat(&[&y, &z], 1)
    }
}
