use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// SGD with heavy-ball momentum: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Updates every trainable parameter; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for path in grads.keys() {
            match params.get(path) {
                None => return Err(Error::UnknownPath(path.clone())),
                Some(p) if p.kind != ParamKind::Trainable => {
                    return Err(Error::InvalidParameter(format!("`{path}` is not trainable")))
                }
                Some(p) if p.value.dims() != grads[path].dims() => {
                    return Err(Error::shape(format!(
                        "`{path}`: gradient {} vs parameter {}",
                        grads[path].dims(),
                        p.value.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        let paths: Vec<String> =
            params.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(k, _)| k.clone()).collect();
        let (lr, m) = (T::of(self.lr), T::of(self.momentum));
        for path in paths {
            let dims = params.tensor(&path)?.dims();
            let v = self.velocity.entry(path.clone()).or_insert_with(|| Tensor::zeros(dims));
            match grads.get(&path) {
                Some(g) => v.data_mut().iter_mut().zip(g.data()).for_each(|(v, &g)| *v = m * *v + g),
                None => v.data_mut().iter_mut().for_each(|v| *v = m * *v),
            }
            let p = params.tensor_mut(&path)?;
            p.data_mut().iter_mut().zip(v.data()).for_each(|(p, &v)| *p = *p - lr * v);
        }
        Ok(())
    }
}
