//! Reverse-mode differentiation over a single-threaded tape.
//!
//! Nodes are appended in evaluation order, which is a topological order, so
//! `backward` walks the node list in reverse and visits each node once.
//! An inference tape records nothing and every [`Var`] it produces is
//! untracked.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, BnMode, Conv2dParams};
use crate::tensor::{Dims, Scalar, Tensor};

/// Backward rule: given the output gradient and which parents need a
/// gradient, returns one optional gradient per parent.
type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

/// One recorded operation.
struct TapeNode<T: Scalar> {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// A value flowing through a computation, optionally tracked by a tape.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn dims(&self) -> Dims {
        self.value.dims()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, node {:?})", self.value, self.node)
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf, if it was reached from the loss.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.node.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<TapeNode<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that never records: values only.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf value; gradients flow to it when `requires_grad` is set.
    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var<T> {
        let value = value.into();
        if !(requires_grad && self.recording) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(TapeNode { op: "leaf", parents: Vec::new(), backward: None });
        Var { value, node: Some(nodes.len() - 1) }
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<T> {
        self.leaf(value, false)
    }

    fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<T> {
        let value = Arc::new(value);
        if !self.recording || parents.iter().all(|p| p.node.is_none()) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(TapeNode {
            op,
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var { value, node: Some(nodes.len() - 1) }
    }

    /// Back-propagates from a scalar. Consumes the recorded rules, so a tape
    /// supports one backward pass.
    pub fn backward(&self, loss: &Var<T>) -> Result<Grads<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {}", loss.dims())));
        }
        let root =
            loss.node.ok_or_else(|| Error::Contract("loss does not depend on any tensor requiring grad".into()))?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes.iter().any(|n| n.op != "leaf" && n.backward.is_none()) {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.dims(), T::one()));
        for i in (0..=root).rev() {
            let node = &mut nodes[i];
            let Some(rule) = node.backward.take() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = rule(&g, &mask)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (p, pg) {
                    accumulate(&mut grads[*p], pg)?;
                }
            }
        }
        // Only leaves keep their gradient.
        for (i, node) in nodes.iter().enumerate() {
            if node.op != "leaf" {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    pub fn conv2d(&self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>, p: Conv2dParams) -> Result<Var<T>> {
        let out = ops::conv2d(x.value(), weight.value(), bias.map(|b| b.value().data()), p)?;
        let (xv, wv) = (x.shared(), weight.shared());
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let bias_dims = bias.map(|b| b.dims());
        Ok(self.record("conv2d", out, &parents, move |g, need| {
            let need_bias = need.get(2).copied().unwrap_or(false);
            let grads = ops::conv2d_backward(&xv, &wv, g, p, need[0], need[1], need_bias)?;
            let mut v = vec![grads.input, grads.weight];
            if let Some(d) = bias_dims {
                v.push(grads.bias.map(|b| Tensor::new(d, b)).transpose()?);
            }
            Ok(v)
        }))
    }

    /// Batch normalization. In training mode also returns the batch
    /// statistics so the caller can update running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        mode: BnMode,
    ) -> Result<(Var<T>, Option<BatchStats<T>>)> {
        let fwd = ops::batchnorm_forward(
            x.value(),
            gamma.value().data(),
            beta.value().data(),
            running_mean,
            running_var,
            eps,
            mode,
        )?;
        let stats = fwd.stats.clone();
        let (xv, gv) = (x.shared(), gamma.shared());
        let (mean, inv_std) = (fwd.mean, fwd.inv_std);
        let (gd, bd) = (gamma.dims(), beta.dims());
        let var = self.record("batchnorm", fwd.output, &[x, gamma, beta], move |g, _| {
            let r = ops::batchnorm_backward(&xv, gv.data(), &mean, &inv_std, g, mode);
            Ok(vec![Some(r.input), Some(Tensor::new(gd, r.gamma)?), Some(Tensor::new(bd, r.beta)?)])
        });
        Ok((var, stats))
    }

    pub fn silu(&self, x: &Var<T>) -> Var<T> {
        let xv = x.shared();
        self.record("silu", ops::silu(x.value()), &[x], move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, |gi, xi| gi * ops::silu_grad_scalar(xi))?)])
        })
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let y = Arc::new(ops::sigmoid(x.value()));
        let ys = y.clone();
        self.record("sigmoid", (*y).clone(), &[x], move |g, _| {
            Ok(vec![Some(g.zip_map(&ys, |gi, yi| gi * yi * (T::one() - yi))?)])
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().zip_map(b.value(), |x, y| x + y)?;
        Ok(self.record("add", out, &[a, b], |g, need| Ok(vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())])))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().zip_map(b.value(), |x, y| x * y)?;
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record("mul", out, &[a, b], move |g, need| {
            let ga = if need[0] { Some(g.zip_map(&bv, |gi, bi| gi * bi)?) } else { None };
            let gb = if need[1] { Some(g.zip_map(&av, |gi, ai| gi * ai)?) } else { None };
            Ok(vec![ga, gb])
        }))
    }

    pub fn scale(&self, x: &Var<T>, s: T) -> Var<T> {
        self.record("scale", x.value().map(|v| v * s), &[x], move |g, _| Ok(vec![Some(g.map(|v| v * s))]))
    }

    /// Sum of all elements, as a 1×1×1×1 scalar.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let dims = x.dims();
        self.record("sum", Tensor::scalar(x.value().sum()), &[x], move |g, _| {
            Ok(vec![Some(Tensor::full(dims, g.data()[0]))])
        })
    }

    pub fn maxpool2d(&self, x: &Var<T>, kernel: usize, stride: usize, padding: usize) -> Result<Var<T>> {
        let (out, argmax) = ops::maxpool2d_with_argmax(x.value(), kernel, stride, padding)?;
        let in_dims = x.dims();
        Ok(self
            .record("maxpool2d", out, &[x], move |g, _| Ok(vec![Some(ops::maxpool2d_backward(in_dims, &argmax, g))])))
    }

    pub fn upsample_nearest2x(&self, x: &Var<T>) -> Var<T> {
        self.record("upsample", ops::upsample_nearest2x(x.value()), &[x], |g, _| {
            Ok(vec![Some(ops::upsample_nearest2x_backward(g))])
        })
    }

    pub fn concat(&self, xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|v| v.value()).collect();
        let out = ops::concat(&values, axis)?;
        let sizes: Vec<usize> = xs.iter().map(|v| v.dims().as_array()[axis]).collect();
        Ok(self.record("concat", out, xs, move |g, need| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (&len, &n) in sizes.iter().zip(need) {
                grads.push(if n { Some(ops::narrow(g, axis, start, len)?) } else { None });
                start += len;
            }
            Ok(grads)
        }))
    }

    pub fn narrow(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = ops::narrow(x.value(), axis, start, len)?;
        let full = x.dims();
        Ok(self.record("narrow", out, &[x], move |g, _| Ok(vec![Some(ops::narrow_backward(g, full, axis, start))])))
    }

    pub fn reshape(&self, x: &Var<T>, dims: impl Into<Dims>) -> Result<Var<T>> {
        let out = x.value().reshape(dims)?;
        let original = x.dims();
        Ok(self.record("reshape", out, &[x], move |g, _| Ok(vec![Some(g.reshape(original)?)])))
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let y = Arc::new(ops::softmax(x.value(), axis)?);
        let ys = y.clone();
        Ok(self.record("softmax", (*y).clone(), &[x], move |g, _| Ok(vec![Some(ops::softmax_backward(&ys, g, axis))])))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let out = ops::matmul(a.value(), b.value(), trans_a, trans_b)?;
        let (av, bv) = (a.shared(), b.shared());
        Ok(self.record("matmul", out, &[a, b], move |g, need| {
            let ga = match (need[0], trans_a) {
                (false, _) => None,
                (true, false) => Some(ops::matmul(g, &bv, false, !trans_b)?),
                (true, true) => Some(ops::matmul(&bv, g, trans_b, true)?),
            };
            let gb = match (need[1], trans_b) {
                (false, _) => None,
                (true, false) => Some(ops::matmul(&av, g, !trans_a, false)?),
                (true, true) => Some(ops::matmul(g, &av, true, trans_a)?),
            };
            Ok(vec![ga, gb])
        }))
    }

    /// An elementwise operator defined by a value function and its
    /// derivative. Used for ad-hoc operators and for negative-control tests
    /// of the gradient checker.
    pub fn elementwise(
        &self,
        op: &'static str,
        x: &Var<T>,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var<T> {
        let xv = x.shared();
        self.record(op, x.value().map(f), &[x], move |g, _| Ok(vec![Some(g.zip_map(&xv, |gi, xi| gi * df(xi))?)]))
    }

    /// A fused operator with a hand-written backward rule. `backward`
    /// receives the output gradient and returns one gradient per input.
    pub fn custom(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<T> {
        self.record(op, value, inputs, backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn((1, 2, 2, 2), |_, c, h, w| (c + h + w) as f64), true);
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn silu_gradient_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros((1, 1, 2, 2)), true);
        let loss = tape.sum(&tape.silu(&x));
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full((1, 1, 1, 3), 2.0), true);
        let y = tape.add(&x, &x).unwrap();
        let z = tape.mul(&y, &x).unwrap(); // 2x²
        let grads = tape.backward(&tape.sum(&z)).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 8.0));
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros((1, 1, 2, 2)), true);
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::zeros((1, 1, 2, 2)), true);
        let y = tape.silu(&x);
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let loss = tape.silu(&x);
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err());
    }
}
