use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::assign::TargetAssignment;

pub const BOX_GAIN: f64 = 7.5;
pub const CLS_GAIN: f64 = 0.5;
pub const DFL_GAIN: f64 = 1.5;

/// Loss components, each normalized by the number of positive cells
/// (at least one).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(box_loss: f64, cls_loss: f64, dfl_loss: f64) -> Self {
        let total = BOX_GAIN * box_loss + CLS_GAIN * cls_loss + DFL_GAIN * dfl_loss;
        LossBreakdown { box_loss, cls_loss, dfl_loss, total }
    }
}

/// Arithmetic needed by CIoU, so one definition serves values and
/// derivatives.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn atan(self) -> Self;

    fn max(self, o: Self) -> Self {
        if self.val() >= o.val() {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.val() <= o.val() {
            self
        } else {
            o
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Forward-mode dual number over the four predicted distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual { v, d }
    }

    fn scale(self, v: f64, k: f64) -> Self {
        Dual { v, d: self.d.map(|x| x * k) }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: std::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: std::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual { v: q, d: std::array::from_fn(|i| (self.d[i] - q * o.d[i]) / o.v) }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-self.v, -1.0)
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn atan(self) -> Self {
        self.scale(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
}

/// `1 − CIoU` between two boxes given as (l, t, r, b) distances from a
/// shared anchor point. Zero exactly when the boxes coincide.
pub fn ciou_loss<R: Real>(p: [R; 4], q: [f64; 4]) -> R {
    let c = R::cst;
    let [pl, pt, pr, pb] = p;
    let [ql, qt, qr, qb] = q.map(c);
    let zero = c(0.0);
    let iw = (pr.min(qr) + pl.min(ql)).max(zero);
    let ih = (pb.min(qb) + pt.min(qt)).max(zero);
    let inter = iw * ih;
    let (wp, hp) = (pl + pr, pt + pb);
    let (wq, hq) = (ql + qr, qt + qb);
    let union = wp * hp + wq * hq - inter;
    let iou = inter / union;
    let cw = pr.max(qr) + pl.max(ql);
    let ch = pb.max(qb) + pt.max(qt);
    let diag2 = cw * cw + ch * ch;
    let dx = ((pr - pl) - (qr - ql)) * c(0.5);
    let dy = ((pb - pt) - (qb - qt)) * c(0.5);
    let rho2 = dx * dx + dy * dy;
    let da = (wq / hq).atan() - (wp / hp).atan();
    let v = c(4.0 / (PI * PI)) * da * da;
    let aspect = if v.val() == 0.0 { zero } else { v * v / (c(1.0) - iou + v) };
    c(1.0) - iou + rho2 / diag2 + aspect
}

/// Stable `softplus(x) = ln(1 + eˣ)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

/// BCE with logits against `y`: value and derivative.
pub fn bce(x: f64, y: f64) -> (f64, f64) {
    (softplus(x) - x * y, sigmoid(x) - y)
}

fn softmax(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Two-hot cross-entropy of bin logits against a fractional target, with its
/// gradient written into `grad`.
pub fn dfl(z: &[f64], target: f64, grad: &mut [f64]) -> f64 {
    let lo = (target.floor() as usize).min(z.len() - 2);
    let wr = target - lo as f64;
    let wl = 1.0 - wr;
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    softmax(z, grad);
    let loss = wl * (lse - z[lo]) + wr * (lse - z[lo + 1]);
    grad[lo] -= wl;
    grad[lo + 1] -= wr;
    loss
}

/// Loss and gradients with respect to the raw maps, in `f64`.
pub struct LossEval {
    pub breakdown: LossBreakdown,
    /// Gradient of `total` per map, same layout as the maps.
    pub grads: [Vec<f64>; 3],
}

fn validate<T: Scalar>(maps: [&Tensor<T>; 3], targets: &[TargetAssignment], nc: usize, reg_max: usize) -> Result<()> {
    if reg_max < 2 {
        return Err(Error::InvalidParameter(format!("reg_max must be at least 2, got {reg_max}")));
    }
    for (s, m) in maps.iter().enumerate() {
        let d = m.dims();
        if d.c != 4 * reg_max + nc {
            return Err(Error::shape(format!("map {s} has {} channels, expected {}", d.c, 4 * reg_max + nc)));
        }
        if d.n != targets.len() {
            return Err(Error::shape(format!("batch of {} with {} target sets", d.n, targets.len())));
        }
        for t in targets {
            let st = t.scales.get(s).ok_or_else(|| Error::shape("targets need three scales"))?;
            if (st.h, st.w) != (d.h, d.w) {
                return Err(Error::shape(format!("map {s} is {}×{}, targets are {}×{}", d.h, d.w, st.h, st.w)));
            }
        }
    }
    Ok(())
}

/// Evaluates the loss on raw head maps and its exact gradient.
pub fn evaluate_loss<T: Scalar>(
    maps: [&Tensor<T>; 3],
    targets: &[TargetAssignment],
    nc: usize,
    reg_max: usize,
) -> Result<LossEval> {
    validate(maps, targets, nc, reg_max)?;
    let n_pos: usize = targets.iter().map(|t| t.num_positive()).sum();
    let norm = n_pos.max(1) as f64;
    let (mut lbox, mut lcls, mut ldfl) = (0.0, 0.0, 0.0);
    let mut grads: [Vec<f64>; 3] = std::array::from_fn(|s| vec![0.0; maps[s].len()]);
    let mut z = vec![0.0; reg_max];
    let mut probs: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; reg_max]);
    let mut g = vec![0.0; reg_max];

    for (s, map) in maps.iter().enumerate() {
        let d = map.dims();
        let plane = d.h * d.w;
        let data = map.data();
        let grad = &mut grads[s];
        for (b, t) in targets.iter().enumerate() {
            let st = &t.scales[s];
            let base = b * d.c * plane;
            for cell in 0..plane {
                let target = st.cells[cell];
                for k in 0..nc {
                    let i = base + (4 * reg_max + k) * plane + cell;
                    let y = if target.is_some_and(|c| c.class_id == k) { 1.0 } else { 0.0 };
                    let (l, dl) = bce(data[i].as_f64(), y);
                    lcls += l;
                    grad[i] += CLS_GAIN * dl / norm;
                }
                let Some(target) = target else { continue };

                let mut dist = [0.0; 4];
                for side in 0..4 {
                    for k in 0..reg_max {
                        z[k] = data[base + (side * reg_max + k) * plane + cell].as_f64();
                    }
                    ldfl += dfl(&z, target.dist[side], &mut g) / 4.0;
                    for k in 0..reg_max {
                        grad[base + (side * reg_max + k) * plane + cell] += DFL_GAIN * g[k] / (4.0 * norm);
                    }
                    softmax(&z, &mut probs[side]);
                    dist[side] = probs[side].iter().enumerate().map(|(k, &pk)| k as f64 * pk).sum();
                }

                let pred: [Dual; 4] = std::array::from_fn(|i| Dual::var(dist[i], i));
                let c = ciou_loss(pred, target.dist);
                lbox += c.v;
                for side in 0..4 {
                    let dd = c.d[side];
                    for k in 0..reg_max {
                        let pk = probs[side][k];
                        // d(expectation)/d(logit_k) = p_k·(k − E)
                        grad[base + (side * reg_max + k) * plane + cell] +=
                            BOX_GAIN * dd * pk * (k as f64 - dist[side]) / norm;
                    }
                }
            }
        }
    }
    Ok(LossEval { breakdown: LossBreakdown::new(lbox / norm, lcls / norm, ldfl / norm), grads })
}

/// Records the loss as one fused tape operator; returns the scalar total and
/// its components.
pub fn detection_loss<T: Scalar>(
    tape: &Tape<T>,
    maps: [&Var<T>; 3],
    targets: &[TargetAssignment],
    nc: usize,
    reg_max: usize,
) -> Result<(Var<T>, LossBreakdown)> {
    let values = maps.map(|m| m.value());
    let eval = evaluate_loss(values, targets, nc, reg_max)?;
    let dims = values.map(|t| t.dims());
    let breakdown = eval.breakdown;
    let grads = eval.grads;
    let out = tape.custom("detection_loss", &maps, Tensor::scalar(T::of(breakdown.total)), move |g, need| {
        let g = g.item().map(|v| v.as_f64()).unwrap_or(0.0);
        grads
            .into_iter()
            .zip(dims)
            .zip(need)
            .map(|((gr, d), &n)| {
                if !n {
                    return Ok(None);
                }
                Tensor::new(d, gr.into_iter().map(|v| T::of(g * v)).collect()).map(Some)
            })
            .collect()
    });
    Ok((out, breakdown))
}
