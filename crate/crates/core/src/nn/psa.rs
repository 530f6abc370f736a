use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::ParamSpec;
use crate::tensor::{Dims, Scalar};

use super::{ConvBlock, Ctx};

/// Multi-head self-attention over spatial positions with a depthwise
/// positional term on the value path.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub channels: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub head_dim: usize,
    pub qkv: ConvBlock,
    pub proj: ConvBlock,
    pub pe: ConvBlock,
}

impl Attention {
    pub fn new(prefix: &str, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!("{c} channels not divisible by {heads} heads")));
        }
        let head_dim = c / heads;
        let key_dim = head_dim / 2;
        if key_dim == 0 {
            return Err(Error::config(format!("head width {head_dim} too small for attention")));
        }
        Ok(Attention {
            channels: c,
            heads,
            key_dim,
            head_dim,
            qkv: ConvBlock::new(format!("{prefix}.qkv"), c, c + 2 * heads * key_dim, 1, 1).linear(),
            proj: ConvBlock::new(format!("{prefix}.proj"), c, c, 1, 1).linear(),
            pe: ConvBlock::new(format!("{prefix}.pe"), c, c, 3, 1).grouped(c).linear(),
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.qkv.param_specs();
        v.extend(self.proj.param_specs());
        v.extend(self.pe.param_specs());
        v
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.qkv.macs(h, w) + self.proj.macs(h, w) + self.pe.macs(h, w)
    }

    /// Output and the `(n, heads, N, N)` attention weights, softmax-normalized
    /// over the last axis.
    pub fn forward_with_weights<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let tape = ctx.tape();
        let d = x.dims();
        let positions = d.h * d.w;
        let (kd, hd) = (self.key_dim, self.head_dim);
        let qkv = self.qkv.forward(ctx, x)?;
        let qkv = tape.reshape(&qkv, Dims::new(d.n, self.heads, 2 * kd + hd, positions))?;
        let q = tape.narrow(&qkv, 2, 0, kd)?;
        let k = tape.narrow(&qkv, 2, kd, kd)?;
        let v = tape.narrow(&qkv, 2, 2 * kd, hd)?;
        let logits = tape.scale(&tape.matmul(&q, &k, true, false)?, T::of((kd as f64).powf(-0.5)));
        let attn = tape.softmax(&logits, 3)?;
        let out = tape.reshape(&tape.matmul(&v, &attn, false, true)?, d)?;
        let pos = self.pe.forward(ctx, &tape.reshape(&v, d)?)?;
        let y = self.proj.forward(ctx, &tape.add(&out, &pos)?)?;
        Ok((y, attn))
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }
}

/// Attention with residual, then a two-layer 1×1 feed-forward with residual.
#[derive(Clone, Debug, PartialEq)]
pub struct PsaBlock {
    pub attn: Attention,
    pub ffn1: ConvBlock,
    pub ffn2: ConvBlock,
}

impl PsaBlock {
    pub fn new(prefix: &str, c: usize) -> Result<Self> {
        Ok(PsaBlock {
            attn: Attention::new(&format!("{prefix}.attn"), c, (c / 64).max(1))?,
            ffn1: ConvBlock::new(format!("{prefix}.ffn.0"), c, 2 * c, 1, 1),
            ffn2: ConvBlock::new(format!("{prefix}.ffn.1"), 2 * c, c, 1, 1).linear(),
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.attn.param_specs();
        v.extend(self.ffn1.param_specs());
        v.extend(self.ffn2.param_specs());
        v
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.attn.macs(h, w) + self.ffn1.macs(h, w) + self.ffn2.macs(h, w)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = ctx.tape();
        let x = tape.add(x, &self.attn.forward(ctx, x)?)?;
        let f = self.ffn2.forward(ctx, &self.ffn1.forward(ctx, &x)?)?;
        tape.add(&x, &f)
    }
}

/// Split conv, PSA units on the second half, merge conv.
#[derive(Clone, Debug, PartialEq)]
pub struct C2psa {
    pub hidden: usize,
    pub cv1: ConvBlock,
    pub units: Vec<PsaBlock>,
    pub cv2: ConvBlock,
}

impl C2psa {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, n: usize) -> Result<Self> {
        if c_in != c_out {
            return Err(Error::config(format!("C2PSA keeps its width, got {c_in} → {c_out}")));
        }
        let c = c_in / 2;
        let units = (0..n).map(|i| PsaBlock::new(&format!("{prefix}.m.{i}"), c)).collect::<Result<_>>()?;
        Ok(C2psa {
            hidden: c,
            cv1: ConvBlock::new(format!("{prefix}.cv1"), c_in, 2 * c, 1, 1),
            units,
            cv2: ConvBlock::new(format!("{prefix}.cv2"), 2 * c, c_out, 1, 1),
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.cv1.param_specs();
        for u in &self.units {
            v.extend(u.param_specs());
        }
        v.extend(self.cv2.param_specs());
        v
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.cv1.macs(h, w) + self.cv2.macs(h, w) + self.units.iter().map(|u| u.macs(h, w)).sum::<u64>()
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let tape = ctx.tape();
        let y = self.cv1.forward(ctx, x)?;
        let a = tape.narrow(&y, 1, 0, self.hidden)?;
        let mut b = tape.narrow(&y, 1, self.hidden, self.hidden)?;
        for u in &self.units {
            b = u.forward(ctx, &b)?;
        }
        self.cv2.forward(ctx, &tape.concat(&[&a, &b], 1)?)
    }
}
