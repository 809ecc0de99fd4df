use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

/// Flat index maps from the broadcast output back into each operand.
/// `None` means the operand already has the output shape.
struct Broadcast {
    shape: Vec<usize>,
    a: Option<Rc<Vec<usize>>>,
    b: Option<Rc<Vec<usize>>>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let shape = broadcast_shape(a, b)?;
        let map = |s: &[usize]| {
            if s == shape.as_slice() {
                None
            } else {
                Some(Rc::new(broadcast_index_map(s, &shape)))
            }
        };
        Ok(Self {
            a: map(a),
            b: map(b),
            shape,
        })
    }
}

#[inline]
fn at<T: Copy>(data: &[T], map: &Option<Rc<Vec<usize>>>, i: usize) -> T {
    match map {
        Some(m) => data[m[i]],
        None => data[i],
    }
}

fn reduce_to<T: Real>(
    shape: &[usize],
    map: &Option<Rc<Vec<usize>>>,
    contrib: impl Fn(usize) -> T,
    n: usize,
) -> Tensor<T> {
    let mut g = Tensor::zeros(shape);
    let gd = g.data_mut();
    match map {
        None => {
            for (i, v) in gd.iter_mut().enumerate() {
                *v = contrib(i);
            }
        }
        Some(m) => {
            for i in 0..n {
                gd[m[i]] += contrib(i);
            }
        }
    }
    g
}

impl<'t, T: Real> Var<'t, T> {
    /// Broadcasting binary op with partial derivatives `da(a, b, out)` and
    /// `db(a, b, out)`.
    fn binary(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (av, bv) = (self.value(), other.value());
        let bc = Broadcast::new(av.shape(), bv.shape())?;
        let n = crate::tensor::numel(&bc.shape);
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = match (&bc.a, &bc.b) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(at(ad, &bc.a, i), at(bd, &bc.b, i))).collect(),
        };
        let out = Tensor::new(bc.shape.clone(), data)?;
        let Broadcast { a: ma, b: mb, .. } = bc;
        Ok(Var::derive(
            self.tape,
            &[self, other],
            out,
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let (g, o) = (ctx.grad.data(), ctx.output.data());
                let ga = reduce_to(
                    ctx.inputs[0].shape(),
                    &ma,
                    |i| g[i] * da(at(a, &ma, i), at(b, &mb, i), o[i]),
                    g.len(),
                );
                let gb = reduce_to(
                    ctx.inputs[1].shape(),
                    &mb,
                    |i| g[i] * db(at(a, &ma, i), at(b, &mb, i), o[i]),
                    g.len(),
                );
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Unary op with derivative `df(x, out)`.
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let out = self.value().map(f);
        Var::derive(
            self.tape,
            &[self],
            out,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let o = ctx.output.data();
                let g = Tensor::from_fn(ctx.grad.shape(), |i| ctx.grad.data()[i] * df(x[i], o[i]));
                vec![Some(g)]
            }),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a / b, |_, b, _| T::one() / b, |_, b, o| -o / b)
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            |a, b| if a <= b { a } else { b },
            |a, b, _| if a <= b { T::one() } else { T::zero() },
            |a, b, _| if a <= b { T::zero() } else { T::one() },
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            |a, b| if a >= b { a } else { b },
            |a, b, _| if a >= b { T::one() } else { T::zero() },
            |a, b, _| if a >= b { T::zero() } else { T::one() },
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, k: T) -> Var<'t, T> {
        self.unary(move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(self, k: T) -> Var<'t, T> {
        self.unary(move |x| x + k, |_, _| T::one())
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, o| o * (T::one() - o))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, o| o)
    }

    /// Natural log; negative inputs are rejected (zero maps to -inf).
    pub fn log(self) -> Result<Var<'t, T>> {
        check_non_negative(&self.value(), "log")?;
        Ok(self.unary(|x| x.ln(), |x, _| T::one() / x))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        check_non_negative(&self.value(), "sqrt")?;
        Ok(self.unary(|x| x.sqrt(), |_, o| T::one() / (o + o)))
    }

    /// `x^beta` for a constant exponent. Negative bases are only accepted for
    /// integral exponents.
    pub fn pow(self, beta: T) -> Result<Var<'t, T>> {
        if beta.fract() != T::zero() {
            check_non_negative(&self.value(), "pow")?;
        }
        Ok(self.unary(
            move |x| x.powf(beta),
            move |x, _| beta * x.powf(beta - T::one()),
        ))
    }
}

/// Logistic function, stable for large |x|.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_non_negative<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|&x| x < T::zero()) {
        return Err(TensorError::Domain {
            op,
            detail: format!("negative input {} at flat index {pos}", t.data()[pos]),
        });
    }
    Ok(())
}
