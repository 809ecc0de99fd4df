use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Downsampling kernel for [`Var::resize_down`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// Top-left sample of each `factor x factor` block.
    Nearest,
    /// Pixel-center aligned bilinear; for integer factors this is block averaging.
    Bilinear,
}

fn dims4<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(shape_err(op, format!("expected 4-d tensor, got {s:?}"))),
    }
}

/// Downsample a plain `[n, c, h, w]` tensor.
pub fn resize_down_tensor<T: Real>(x: &Tensor<T>, factor: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "resize_down")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err(
            "resize_down",
            format!("spatial size {h}x{w} is not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let xd = x.data();
    let inv = T::one() / T::from_f64((factor * factor) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = match mode {
                    ResizeMode::Nearest => src[oy * factor * w + ox * factor],
                    ResizeMode::Bilinear => {
                        let mut s = T::zero();
                        for dy in 0..factor {
                            for dx in 0..factor {
                                s += src[(oy * factor + dy) * w + ox * factor + dx];
                            }
                        }
                        s * inv
                    }
                };
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn resize_down(self, factor: usize, mode: ResizeMode) -> Result<Var<'t, T>> {
        let out = resize_down_tensor(&self.value(), factor, mode)?;
        Ok(Var::derive(
            self.tape,
            &[self],
            out,
            Box::new(move |ctx| {
                let [n, c, h, w] = dims4(&ctx.inputs[0], "resize_down").unwrap();
                let (oh, ow) = (h / factor, w / factor);
                let g = ctx.grad.data();
                let inv = T::one() / T::from_f64((factor * factor) as f64);
                let mut gx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = src[oy * ow + ox];
                            match mode {
                                ResizeMode::Nearest => dst[oy * factor * w + ox * factor] += v,
                                ResizeMode::Bilinear => {
                                    for dy in 0..factor {
                                        for dx in 0..factor {
                                            dst[(oy * factor + dy) * w + ox * factor + dx] += v * inv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "upsample_nearest")?;
        if factor == 0 {
            return Err(shape_err("upsample_nearest", "factor must be at least 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = x.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[plane * oh * ow + oy * ow + ox] =
                        xd[plane * h * w + (oy / factor) * w + ox / factor];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(Var::derive(
            self.tape,
            &[self],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[plane * h * w + (oy / factor) * w + ox / factor] +=
                                g[plane * oh * ow + oy * ow + ox];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], gx).unwrap())]
            }),
        ))
    }
}
