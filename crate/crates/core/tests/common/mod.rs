//! Naive reference implementations shared by integration tests.
#![allow(dead_code)]

use ghosthead::params::ParamStore;
use ghosthead::{Dims, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: Scalar>(dims: impl Into<Dims>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let d = dims.into();
    Tensor::new(d, (0..d.len()).map(|_| T::of(rng.random_range(lo..hi))).collect()).unwrap()
}

pub fn to64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn max_abs_diff<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Direct seven-loop convolution in f64.
pub fn naive_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let xd = x.dims();
    let wd = w.dims();
    let (co, cig, k) = (wd.n, wd.c, wd.h);
    let ho = (xd.h + 2 * pad - k) / stride + 1;
    let wo = (xd.w + 2 * pad - wd.w) / stride + 1;
    let cog = co / groups;
    Tensor::from_fn((xd.n, co, ho, wo), |n, o, i, j| {
        let g = o / cog;
        let mut acc = bias.map_or(0.0, |b| b[o].as_f64());
        for ci in 0..cig {
            for a in 0..k {
                for b in 0..wd.w {
                    let y = (i * stride + a) as isize - pad as isize;
                    let xx = (j * stride + b) as isize - pad as isize;
                    if y < 0 || xx < 0 || y >= xd.h as isize || xx >= xd.w as isize {
                        continue;
                    }
                    acc += x.at(n, g * cig + ci, y as usize, xx as usize).as_f64() * w.at(o, ci, a, b).as_f64();
                }
            }
        }
        acc
    })
}

pub fn naive_maxpool<T: Scalar>(x: &Tensor<T>, k: usize, s: usize, p: usize) -> Tensor<f64> {
    let d = x.dims();
    let ho = (d.h + 2 * p - k) / s + 1;
    let wo = (d.w + 2 * p - k) / s + 1;
    Tensor::from_fn((d.n, d.c, ho, wo), |n, c, i, j| {
        let mut m = f64::NEG_INFINITY;
        for a in 0..k {
            for b in 0..k {
                let y = (i * s + a) as isize - p as isize;
                let xx = (j * s + b) as isize - p as isize;
                if y >= 0 && xx >= 0 && (y as usize) < d.h && (xx as usize) < d.w {
                    m = m.max(x.at(n, c, y as usize, xx as usize).as_f64());
                }
            }
        }
        m
    })
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn naive_cat(xs: &[&Tensor<f64>]) -> Tensor<f64> {
    let d0 = xs[0].dims();
    let c: usize = xs.iter().map(|t| t.dims().c).sum();
    Tensor::from_fn((d0.n, c, d0.h, d0.w), |n, ch, i, j| {
        let mut ch = ch;
        for t in xs {
            if ch < t.dims().c {
                return t.at(n, ch, i, j);
            }
            ch -= t.dims().c;
        }
        unreachable!()
    })
}

pub fn naive_slice(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let d = x.dims();
    Tensor::from_fn((d.n, len, d.h, d.w), |n, c, i, j| x.at(n, start + c, i, j))
}

pub fn naive_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    a.zip_map(b, |x, y| x + y).unwrap()
}

fn get(store: &ParamStore<f32>, path: &str) -> Tensor<f32> {
    (**store.tensor(path).unwrap()).clone()
}

/// conv (no bias) → inference BN → optional SiLU, from raw loops.
pub fn conv_block(
    store: &ParamStore<f32>,
    prefix: &str,
    x: &Tensor<f64>,
    stride: usize,
    groups: usize,
    act: bool,
) -> Tensor<f64> {
    let w = get(store, &format!("{prefix}.conv.weight")).cast::<f64>();
    let k = w.dims().h;
    let y = naive_conv(x, &w, None, stride, k / 2, groups);
    let g = get(store, &format!("{prefix}.bn.weight"));
    let b = get(store, &format!("{prefix}.bn.bias"));
    let m = get(store, &format!("{prefix}.bn.running_mean"));
    let v = get(store, &format!("{prefix}.bn.running_var"));
    Tensor::from_fn(y.dims(), |n, c, i, j| {
        let z = (y.at(n, c, i, j) - m.data()[c] as f64) / (v.data()[c] as f64 + 1e-3).sqrt() * g.data()[c] as f64
            + b.data()[c] as f64;
        if act {
            silu(z)
        } else {
            z
        }
    })
}

/// Depthwise conv with bias → SiLU.
pub fn dw_block(store: &ParamStore<f32>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
    let w = get(store, &format!("{prefix}.weight")).cast::<f64>();
    let b = get(store, &format!("{prefix}.bias")).cast::<f64>();
    let c = w.dims().n;
    naive_conv(x, &w, Some(b.data()), 1, w.dims().h / 2, c).map(silu)
}

/// Randomizes BN affine terms and running statistics so that oracles
/// exercise every parameter.
pub fn randomize_bn(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) {
    let paths: Vec<String> = store.paths().cloned().collect();
    for p in paths {
        let (lo, hi) = if p.ends_with("bn.weight") || p.ends_with("running_var") {
            (0.5, 1.5)
        } else if p.ends_with("bn.bias") || p.ends_with("running_mean") {
            (-0.3, 0.3)
        } else {
            continue;
        };
        let t = store.tensor_mut(&p).unwrap();
        *t = rand_tensor(t.dims(), lo, hi, rng);
    }
}
