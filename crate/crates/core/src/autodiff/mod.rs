//! Reverse-mode automatic differentiation over small dense tensors.

mod tape;
mod tensor;

pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck<T> {
    /// Largest `|analytic - numeric| / (|analytic| + 1e-8)` over all inputs.
    pub max_rel_err: T,
    pub analytic: Vec<Tensor<T>>,
    pub numeric: Vec<Tensor<T>>,
}

/// Checks the gradient of a scalar function built on a tape against central
/// finite differences with step `h`.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut max_rel_err = T::zero();
    for (k, x) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let orig = x.data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let num = (fp - fm) / (h + h);
            g.data_mut()[i] = num;
            let a = analytic[k].data()[i];
            let err = (a - num).abs() / (a.abs() + T::lit(1e-8));
            max_rel_err = max_rel_err.max(err);
        }
        numeric.push(g);
    }
    Ok(GradCheck {
        max_rel_err,
        analytic,
        numeric,
    })
}
