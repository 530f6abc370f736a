//! Network building blocks. Each block knows its parameter layout, its
//! multiply-accumulate count and how to run forward on a tape.

mod conv;
mod csp;
mod head;
mod psa;
mod sppf;

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::{BatchStats, BnMode, BN_EPS};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub use conv::{Conv2dLayer, ConvBlock, DwConvBlock, GhostConv};
pub use csp::{Bottleneck, C3k, CspBlock, CspUnit};
pub use head::{DetectHead, BOX_BIAS, CLASS_PRIOR};
pub use psa::{Attention, C2psa, PsaBlock};
pub use sppf::Sppf;

/// MACs of one convolution producing `c_out × h × w` outputs.
pub fn conv_macs(c_in: usize, c_out: usize, k: usize, groups: usize, h: usize, w: usize) -> u64 {
    (c_out * h * w) as u64 * (c_in / groups) as u64 * (k * k) as u64
}

/// Forward-pass state: the tape, parameter values, BN mode and the batch
/// statistics gathered along the way.
pub struct Ctx<'a, T: Scalar> {
    tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    mode: BnMode,
    track_params: bool,
    vars: RefCell<BTreeMap<String, Var<T>>>,
    bn_stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Running-statistics BN, parameters held constant.
    pub fn inference(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self::new(tape, params, BnMode::Inference, false)
    }

    /// Batch-statistics BN, parameters registered as tape leaves.
    pub fn training(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self::new(tape, params, BnMode::Training, true)
    }

    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>, mode: BnMode, track_params: bool) -> Self {
        Ctx { tape, params, mode, track_params, vars: RefCell::default(), bn_stats: RefCell::default() }
    }

    /// Uses `vars` in place of the stored values for the given paths.
    pub fn with_vars(self, vars: BTreeMap<String, Var<T>>) -> Self {
        *self.vars.borrow_mut() = vars;
        self
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// The variable for a parameter path, created once per context.
    pub fn param(&self, path: &str) -> Result<Var<T>> {
        if let Some(v) = self.vars.borrow().get(path) {
            return Ok(v.clone());
        }
        let value = self.params.tensor(path)?.clone();
        let var = self.tape.leaf(value, self.track_params);
        self.vars.borrow_mut().insert(path.to_string(), var.clone());
        Ok(var)
    }

    /// Every parameter variable touched so far.
    pub fn param_vars(&self) -> BTreeMap<String, Var<T>> {
        self.vars.borrow().clone()
    }

    /// Batch statistics recorded by training-mode BN, keyed by BN prefix.
    pub fn take_bn_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut *self.bn_stats.borrow_mut())
    }

    pub fn batchnorm(&self, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let rm = self.params.tensor(&format!("{prefix}.running_mean"))?;
        let rv = self.params.tensor(&format!("{prefix}.running_var"))?;
        let (y, stats) = self.tape.batchnorm(x, &gamma, &beta, rm.data(), rv.data(), T::of(BN_EPS), self.mode)?;
        if let Some(s) = stats {
            self.bn_stats.borrow_mut().push((prefix.to_string(), s));
        }
        Ok(y)
    }
}
