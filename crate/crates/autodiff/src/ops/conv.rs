use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::real::{matmul_into, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-d cross-correlation of `[batch, cin, h, w]` with `[cout, cin, kh, kw]`,
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-d input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if ws[1] != xs[1] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "weight {ws:?} expects {} input channels, input {xs:?} has {}",
                    ws[1], xs[1]
                ),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1"));
        }
        let (Some(oh), Some(ow)) = (
            conv_output_size(xs[2], ws[2], stride, padding),
            conv_output_size(xs[3], ws[3], stride, padding),
        ) else {
            return Err(shape_err(
                "conv2d",
                format!("kernel {ws:?} larger than padded input {xs:?} (pad {padding})"),
            ));
        };
        if let Some(b) = &bias {
            self.same_tape(b)?;
            if b.shape() != [ws[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} for {} output channels", b.shape(), ws[0]),
                ));
            }
        }
        let g = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            oh,
            ow,
        };
        let (k, p) = (g.col_rows(), g.out_pixels());
        let in_len = g.cin * g.h * g.w;
        let out_len = g.cout * p;
        let mut out = vec![T::zero(); g.batch * out_len];
        let mut all_cols: Vec<T> = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); g.batch * k * p]
        };
        for n in 0..g.batch {
            let xin = &x.data()[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xin
            } else {
                let c = &mut all_cols[n * k * p..(n + 1) * k * p];
                im2col(xin, &g, c);
                c
            };
            let dst = &mut out[n * out_len..(n + 1) * out_len];
            matmul_into(g.cout, k, p, w.data(), false, cols, false, dst, false);
        }
        if let Some(b) = &bias {
            let bv = b.value();
            for n in 0..g.batch {
                for (co, &bc) in bv.data().iter().enumerate() {
                    let off = n * out_len + co * p;
                    out[off..off + p].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let out = Tensor::from_vec(&[g.batch, g.cout, oh, ow], out)?;
        let cols = Rc::new(all_cols);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Var::derive(
            self.tape,
            &inputs,
            out,
            Box::new(move |ctx| {
                let gout = ctx.grad.data();
                let x = ctx.inputs[0].data();
                let w = ctx.inputs[1].data();
                let mut gw = vec![T::zero(); g.cout * k];
                let mut gx = vec![T::zero(); g.batch * in_len];
                let mut gcols = vec![T::zero(); k * p];
                for n in 0..g.batch {
                    let go = &gout[n * out_len..(n + 1) * out_len];
                    let cols_n: &[T] = if g.is_pointwise() {
                        &x[n * in_len..(n + 1) * in_len]
                    } else {
                        &cols[n * k * p..(n + 1) * k * p]
                    };
                    matmul_into(g.cout, p, k, go, false, cols_n, true, &mut gw, true);
                    let gx_n = &mut gx[n * in_len..(n + 1) * in_len];
                    if g.is_pointwise() {
                        matmul_into(k, g.cout, p, w, true, go, false, gx_n, false);
                    } else {
                        matmul_into(k, g.cout, p, w, true, go, false, &mut gcols, false);
                        col2im(&gcols, &g, gx_n);
                    }
                }
                let mut grads = vec![
                    Some(Tensor::from_vec(ctx.inputs[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(ctx.inputs[1].shape(), gw).unwrap()),
                ];
                if ctx.inputs.len() == 3 {
                    let mut gb = vec![T::zero(); g.cout];
                    for n in 0..g.batch {
                        for (co, v) in gb.iter_mut().enumerate() {
                            let off = n * out_len + co * p;
                            *v += gout[off..off + p].iter().copied().sum::<T>();
                        }
                    }
                    grads.push(Some(Tensor::from_vec(&[g.cout], gb).unwrap()));
                }
                grads
            }),
        ))
    }
}
