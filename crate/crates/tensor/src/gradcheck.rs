//! Central finite-difference gradient checking at 64-bit precision.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation size `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Denominator floor of the relative error, so gradients that are
    /// numerically zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, floor: 1e-3 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over elements of `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_err: f64,
    /// (input, element, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ii].data_mut()[e] = orig + cfg.step;
            let plus = eval(&work)?;
            work[ii].data_mut()[e] = orig - cfg.step;
            let minus = eval(&work)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ii][e];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((ii, e, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor to a scalar as `Σ wᵢ yᵢ` with fixed weights, so the
/// upstream gradient seen by the op under test is non-uniform.
pub fn project_to_scalar(tape: &mut Tape<'_, f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}
