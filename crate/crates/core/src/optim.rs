//! Stochastic gradient descent with momentum and L2 weight decay.

use dsl_autodiff::{Gradients, Real, Tensor};

use crate::detector::{Bound, ParamSet};
use crate::error::{CoreError, Result};

/// Gradients of every bound parameter; parameters the loss does not reach get zeros.
pub fn collect_grads<T: Real>(bound: &Bound<'_, T>, grads: &Gradients<T>) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for (name, var) in bound.iter() {
        out.insert(name, grads.get_or_zeros(var));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter, same keys and shapes as the model.
    pub buffers: ParamSet<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut buffers = ParamSet::new();
        for (name, t) in params.iter() {
            buffers.insert(name, Tensor::zeros(t.shape()));
        }
        Self {
            momentum,
            weight_decay,
            buffers,
        }
    }

    /// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.buffers)?;
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if !g.all_finite() {
                return Err(CoreError::Param {
                    name: name.to_string(),
                    message: "non-finite gradient".into(),
                });
            }
            let v = self.buffers.get_mut(name)?;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
