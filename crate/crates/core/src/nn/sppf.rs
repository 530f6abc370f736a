use crate::autograd::Var;
use crate::error::Result;
use crate::params::ParamSpec;
use crate::tensor::Scalar;

use super::{ConvBlock, Ctx};

/// Spatial pyramid pooling, fast form: three chained k×k max pools.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub k: usize,
}

impl Sppf {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let c = c_in / 2;
        Sppf {
            cv1: ConvBlock::new(format!("{prefix}.cv1"), c_in, c, 1, 1),
            cv2: ConvBlock::new(format!("{prefix}.cv2"), 4 * c, c_out, 1, 1),
            k,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.cv1.param_specs();
        v.extend(self.cv2.param_specs());
        v
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.cv1.macs(h, w) + self.cv2.macs(h, w)
    }

    /// `[h0, p1, p2, p3]` before the merge conv.
    pub fn pyramid<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<[Var<T>; 4]> {
        let tape = ctx.tape();
        let pad = self.k / 2;
        let h0 = self.cv1.forward(ctx, x)?;
        let p1 = tape.maxpool2d(&h0, self.k, 1, pad)?;
        let p2 = tape.maxpool2d(&p1, self.k, 1, pad)?;
        let p3 = tape.maxpool2d(&p2, self.k, 1, pad)?;
        Ok([h0, p1, p2, p3])
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let [h0, p1, p2, p3] = self.pyramid(ctx, x)?;
        self.cv2.forward(ctx, &ctx.tape().concat(&[&h0, &p1, &p2, &p3], 1)?)
    }
}
