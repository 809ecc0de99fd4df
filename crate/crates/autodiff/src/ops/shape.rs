use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::real::{matmul_into, Real};
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(Var::derive(
            self.tape,
            &[self],
            out,
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .reshape(ctx.inputs[0].shape())
                    .expect("reshape gradient");
                vec![Some(g)]
            }),
        ))
    }

    /// Gathers elements by flat index into a tensor of `shape`.
    /// Repeated indices accumulate their gradients.
    pub fn take(self, indices: Vec<usize>, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if numel(shape) != indices.len() {
            return Err(shape_err(
                "take",
                format!("{} indices for output shape {:?}", indices.len(), shape),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(shape_err(
                "take",
                format!("index {bad} out of range for {} elements", x.numel()),
            ));
        }
        let xd = x.data();
        let out = Tensor::from_vec(shape, indices.iter().map(|&i| xd[i]).collect())?;
        let indices = Rc::new(indices);
        Ok(Var::derive(
            self.tape,
            &[self],
            out,
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                let gd = gx.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    gd[i] += ctx.grad.data()[k];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(Var::derive(
            self.tape,
            &[self, other],
            out,
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut ga = vec![T::zero(); m * k];
                matmul_into(m, n, k, g, false, b, true, &mut ga, false);
                let mut gb = vec![T::zero(); k * n];
                matmul_into(k, m, n, a, true, g, false, &mut gb, false);
                vec![
                    Some(Tensor::from_vec(&[m, k], ga).unwrap()),
                    Some(Tensor::from_vec(&[k, n], gb).unwrap()),
                ]
            }),
        ))
    }
}
