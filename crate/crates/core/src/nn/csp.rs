use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::ParamSpec;
use crate::tensor::Scalar;

use super::{ConvBlock, Ctx};

/// Two 3×3 conv blocks (through `e·c_out` hidden channels) with an optional
/// residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, shortcut: bool, e: f64) -> Result<Self> {
        if shortcut && c_in != c_out {
            return Err(Error::config(format!("bottleneck shortcut needs c_in == c_out, got {c_in} and {c_out}")));
        }
        let c = ((c_out as f64 * e) as usize).max(1);
        Ok(Bottleneck {
            cv1: ConvBlock::new(format!("{prefix}.cv1"), c_in, c, 3, 1),
            cv2: ConvBlock::new(format!("{prefix}.cv2"), c, c_out, 3, 1),
            shortcut,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.cv1.param_specs();
        v.extend(self.cv2.param_specs());
        v
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.cv1.macs(h, w) + self.cv2.macs(h, w)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.cv2.forward(ctx, &self.cv1.forward(ctx, x)?)?;
        if self.shortcut {
            ctx.tape().add(x, &y)
        } else {
            Ok(y)
        }
    }
}

/// Split conv, a chain of bottlenecks on one branch, merge conv.
#[derive(Clone, Debug, PartialEq)]
pub struct C3k {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub cv3: ConvBlock,
    pub m: Vec<Bottleneck>,
}

impl C3k {
    pub const REPEATS: usize = 2;

    pub fn new(prefix: &str, c_in: usize, c_out: usize, n: usize, shortcut: bool) -> Result<Self> {
        let c = c_out / 2;
        let m =
            (0..n).map(|i| Bottleneck::new(&format!("{prefix}.m.{i}"), c, c, shortcut, 1.0)).collect::<Result<_>>()?;
        Ok(C3k {
            cv1: ConvBlock::new(format!("{prefix}.cv1"), c_in, c, 1, 1),
            cv2: ConvBlock::new(format!("{prefix}.cv2"), c_in, c, 1, 1),
            cv3: ConvBlock::new(format!("{prefix}.cv3"), 2 * c, c_out, 1, 1),
            m,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.cv1.param_specs();
        v.extend(self.cv2.param_specs());
        v.extend(self.cv3.param_specs());
        for b in &self.m {
            v.extend(b.param_specs());
        }
        v
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.cv1.macs(h, w)
            + self.cv2.macs(h, w)
            + self.cv3.macs(h, w)
            + self.m.iter().map(|b| b.macs(h, w)).sum::<u64>()
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut a = self.cv1.forward(ctx, x)?;
        for b in &self.m {
            a = b.forward(ctx, &a)?;
        }
        let b = self.cv2.forward(ctx, x)?;
        self.cv3.forward(ctx, &ctx.tape().concat(&[&a, &b], 1)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CspUnit {
    Bottleneck(Bottleneck),
    C3k(C3k),
}

impl CspUnit {
    fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            CspUnit::Bottleneck(b) => b.param_specs(),
            CspUnit::C3k(b) => b.param_specs(),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            CspUnit::Bottleneck(b) => b.macs(h, w),
            CspUnit::C3k(b) => b.macs(h, w),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            CspUnit::Bottleneck(b) => b.forward(ctx, x),
            CspUnit::C3k(b) => b.forward(ctx, x),
        }
    }
}

/// The C2f topology, also used by C3k2: 1×1 conv to two halves, a chain of
/// units on the second half keeping every intermediate, concat, 1×1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct CspBlock {
    pub hidden: usize,
    pub cv1: ConvBlock,
    pub units: Vec<CspUnit>,
    pub cv2: ConvBlock,
}

impl CspBlock {
    /// Hidden ratio of the plain bottleneck units.
    pub const UNIT_RATIO: f64 = 0.5;

    fn with_units(prefix: &str, c_in: usize, c_out: usize, hidden: usize, units: Vec<CspUnit>) -> Self {
        let n = units.len();
        CspBlock {
            hidden,
            cv1: ConvBlock::new(format!("{prefix}.cv1"), c_in, 2 * hidden, 1, 1),
            units,
            cv2: ConvBlock::new(format!("{prefix}.cv2"), (2 + n) * hidden, c_out, 1, 1),
        }
    }

    fn hidden(c_out: usize, e: f64) -> Result<usize> {
        let c = (c_out as f64 * e) as usize;
        if c == 0 {
            return Err(Error::config(format!("hidden width of {c_out}×{e} is zero")));
        }
        Ok(c)
    }

    pub fn c2f(prefix: &str, c_in: usize, c_out: usize, n: usize, shortcut: bool, e: f64) -> Result<Self> {
        let c = Self::hidden(c_out, e)?;
        let units = (0..n)
            .map(|i| {
                Ok(CspUnit::Bottleneck(Bottleneck::new(&format!("{prefix}.m.{i}"), c, c, shortcut, Self::UNIT_RATIO)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self::with_units(prefix, c_in, c_out, c, units))
    }

    /// With `c3k` unset this is exactly [`CspBlock::c2f`].
    pub fn c3k2(prefix: &str, c_in: usize, c_out: usize, n: usize, c3k: bool, e: f64, shortcut: bool) -> Result<Self> {
        if !c3k {
            return Self::c2f(prefix, c_in, c_out, n, shortcut, e);
        }
        let c = Self::hidden(c_out, e)?;
        let units = (0..n)
            .map(|i| Ok(CspUnit::C3k(C3k::new(&format!("{prefix}.m.{i}"), c, c, C3k::REPEATS, shortcut)?)))
            .collect::<Result<_>>()?;
        Ok(Self::with_units(prefix, c_in, c_out, c, units))
    }

    pub fn c_out(&self) -> usize {
        self.cv2.c_out
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
        let mut outs = vec![tape.narrow(&y, 1, 0, self.hidden)?, tape.narrow(&y, 1, self.hidden, self.hidden)?];
        for u in &self.units {
            let next = u.forward(ctx, outs.last().expect("two halves"))?;
            outs.push(next);
        }
        let refs: Vec<&Var<T>> = outs.iter().collect();
        self.cv2.forward(ctx, &tape.concat(&refs, 1)?)
    }
}
