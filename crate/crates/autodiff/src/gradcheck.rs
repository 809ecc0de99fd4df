//! Central finite-difference checks for analytic gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check: worst relative error over all inputs.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Index of the input with the worst error.
    pub worst_input: usize,
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
    };
    let mut xs = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let plus = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let minus = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let err = relative_error(a.data(), &numeric, 1e-10);
        if err > out.max_rel_error {
            out = GradCheck {
                max_rel_error: err,
                worst_input: k,
            };
        }
    }
    Ok(out)
}
