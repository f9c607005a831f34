use crate::error::{Error, Result};
use crate::model::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and decoupled weight decay:
/// `v = m v + g`, `p -= lr (v + wd p)`, with decay only on `ParamKind::Decay`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (m, lr_t) = (T::lit(self.momentum), T::lit(lr));
        for (id, g) in grads {
            let kind = store.entry(*id).kind;
            if !kind.trainable() {
                return Err(Error::InvalidArgument(format!("{} is not trainable", store.entry(*id).name)));
            }
            let wd = if kind == ParamKind::Decay { T::lit(self.weight_decay) } else { T::zero() };
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = m * *vi + gi;
                *pi = *pi - lr_t * (*vi + wd * *pi);
            }
        }
        Ok(())
    }
}

/// Linear decay from `lr0` at the first epoch to `lrf * lr0` at the last.
pub fn linear_lr(lr0: f64, lrf: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr0;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    lr0 * (1.0 - (1.0 - lrf) * t)
}
