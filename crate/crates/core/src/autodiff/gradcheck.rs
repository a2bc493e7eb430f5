use crate::error::{FuxiError, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − fd| / max(1, |fd|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(FuxiError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Checks the tape gradient of a scalar function `f` at `x` against central
/// finite differences with step `fd_step`.
pub fn grad_check<F>(f: F, x: &Tensor, fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(fd_step > 0.0 && fd_step <= 1e-3) {
        return Err(FuxiError::invalid(format!(
            "fd_step must lie in (0, 1e-3], got {fd_step}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + fd_step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - fd_step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * fd_step));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
