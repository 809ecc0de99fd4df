use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{broadcast_index_map, numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

impl<'t, T: Real> Var<'t, T> {
    /// Reduces over `axes` (duplicates ignored), dropping them from the shape.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        for &a in axes {
            x.check_axis(a)?;
        }
        let keep: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count = numel(x.shape()) / numel(&keep).max(1);
        let out_len = numel(&out_shape);
        if count == 0 && kind != ReduceKind::Sum && out_len > 0 {
            return Err(TensorError::EmptyReduction {
                op: if kind == ReduceKind::Mean { "mean" } else { "max" },
            });
        }
        // Input flat index -> output flat index.
        let map = Rc::new(broadcast_index_map(&keep, x.shape()));
        let xd = x.data();
        let mut out = vec![T::zero(); out_len];
        let mut arg: Vec<usize> = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (i, &v) in xd.iter().enumerate() {
                    out[map[i]] += v;
                }
                if kind == ReduceKind::Mean {
                    let c = T::from_f64(count as f64);
                    out.iter_mut().for_each(|v| *v /= c);
                }
            }
            ReduceKind::Max => {
                arg = vec![usize::MAX; out_len];
                for (i, &v) in xd.iter().enumerate() {
                    let o = map[i];
                    if arg[o] == usize::MAX || v > out[o] {
                        out[o] = v;
                        arg[o] = i;
                    }
                }
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(Var::derive(
            self.tape,
            &[self],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let shape = ctx.inputs[0].shape();
                let gx = match kind {
                    ReduceKind::Sum => Tensor::from_fn(shape, |i| g[map[i]]),
                    ReduceKind::Mean => {
                        let c = T::from_f64(count as f64);
                        Tensor::from_fn(shape, |i| g[map[i]] / c)
                    }
                    ReduceKind::Max => {
                        let mut gx = Tensor::zeros(shape);
                        for (o, &i) in arg.iter().enumerate() {
                            gx.data_mut()[i] += g[o];
                        }
                        gx
                    }
                };
                vec![Some(gx)]
            }),
        ))
    }

    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Sum, axes)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Mean, axes)
    }

    pub fn max_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Max, axes)
    }

    /// Sum of every element as a rank-0 tensor (zero for empty inputs).
    pub fn sum_all(self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes)
            .expect("sum over all axes is always valid")
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if numel(&shape) == 0 {
            return Err(TensorError::EmptyReduction { op: "mean" });
        }
        let axes: Vec<usize> = (0..shape.len()).collect();
        self.reduce(ReduceKind::Mean, &axes)
    }

    pub fn max_all(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if numel(&shape) == 0 {
            return Err(TensorError::EmptyReduction { op: "max" });
        }
        let axes: Vec<usize> = (0..shape.len()).collect();
        self.reduce(ReduceKind::Max, &axes)
    }
}
