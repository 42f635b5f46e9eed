use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest `|analytic − central difference| / max(1, |analytic|)` over every
/// coordinate of `x`, for a scalar-valued `f`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`finite_diff_check`]; every input is perturbed.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
