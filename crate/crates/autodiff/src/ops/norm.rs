use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Real> Var<'t, T> {
    /// Parameter-free group normalization over `[n, c, ...]`.
    ///
    /// Each of the `groups` channel groups of each sample is shifted to zero
    /// mean and scaled to unit (biased) variance. There is no running state.
    pub fn group_norm(self, groups: usize, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
            return Err(shape_err(
                "group_norm",
                format!("{groups} groups do not divide the channel axis of {s:?}"),
            ));
        }
        let n = s[0];
        let group_len = x.numel() / (n * groups).max(1);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); n * groups];
        if group_len > 0 {
            let len = T::from_f64(group_len as f64);
            for (gi, (src, dst)) in x
                .data()
                .chunks(group_len)
                .zip(out.chunks_mut(group_len))
                .enumerate()
            {
                let mean = src.iter().copied().sum::<T>() / len;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
                let is = T::one() / (var + eps).sqrt();
                inv_std[gi] = is;
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * is;
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        Ok(Var::derive(
            self.tape,
            &[self],
            out,
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut gx = vec![T::zero(); y.len()];
                if group_len > 0 {
                    let len = T::from_f64(group_len as f64);
                    for gi in 0..inv_std.len() {
                        let r = gi * group_len..(gi + 1) * group_len;
                        let (yg, gg) = (&y[r.clone()], &g[r.clone()]);
                        let mean_g = gg.iter().copied().sum::<T>() / len;
                        let mean_gy = gg.iter().zip(yg).map(|(&a, &b)| a * b).sum::<T>() / len;
                        for ((d, &gv), &yv) in gx[r].iter_mut().zip(gg).zip(yg) {
                            *d = inv_std[gi] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gx).unwrap())]
            }),
        ))
    }
}
