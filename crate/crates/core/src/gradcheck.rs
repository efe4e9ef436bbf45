//! Central finite-difference checks for tape gradients (float64).

use alloc::vec::Vec;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check for one input tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂)`; zero when both vanish.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences
/// at step `eps`, one report per input.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let mut num = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            num.push((up - down) / (2.0 * eps));
        }
        let diff: f64 = libm::sqrt(analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>());
        let an = libm::sqrt(analytic.norm_sq());
        let nn = libm::sqrt(num.iter().map(|v| v * v).sum::<f64>());
        let denom = an + nn;
        reports.push(GradCheck {
            rel_err: if denom == 0.0 { 0.0 } else { diff / denom },
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    Ok(reports)
}

/// Largest relative error across all reports.
pub fn worst(reports: &[GradCheck]) -> f64 {
    reports.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}
