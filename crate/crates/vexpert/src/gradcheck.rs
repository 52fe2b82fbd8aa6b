//! Central finite-difference verification of tape gradients.

use crate::tensor::{Result, Tape, Tensor, TensorId};

/// Outcome of a gradient check for one input tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Relative error with a unit floor: |a-b| / max(|a|, |b|, 1).
/// The floor turns the measure into absolute error for sub-unit
/// gradients, where finite-difference noise would otherwise dominate.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences of a scalar-valued tensor function:
/// g_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_diff<F>(f: &F, x: &Tensor, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xi = tape.leaf(&Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut tape, xi)?;
        Ok(tape.data(out)[0])
    };
    let base = x.data();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += step;
        let mut minus = base.to_vec();
        minus[i] -= step;
        grad[i] = (eval(plus)? - eval(minus)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Compare the tape gradient of `f` at `x` against central differences.
/// `f` must be deterministic and produce a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let xi = tape.leaf(&x.clone().with_requires_grad(true));
    let out = f(&mut tape, xi)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xi)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let numeric = finite_diff(&f, x, step)?;
    Ok(compare(&analytic, &numeric, tol))
}

/// Worst-case relative error between two gradient vectors.
pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> GradReport {
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    GradReport {
        max_rel_err,
        worst_index,
        tol,
        pass: max_rel_err < tol,
    }
}
