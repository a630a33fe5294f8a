//! Finite-difference verification of reverse-mode gradients.
//!
//! The loss closure is evaluated twice per input element with a central
//! perturbation and compared against the gradient from one backward pass.
//! Closures must be deterministic: any randomness inside (dropout masks)
//! has to be reseeded identically on every call.

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares analytic gradients of `loss` with central finite differences of
/// step `h` for every element of every input. The relative error uses
/// `max(|analytic|, |numeric|, floor)` as denominator so near-zero gradients
/// are judged on absolute error.
pub fn check_gradients(
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    floor: f64,
    loss: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let vars: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| Tensor::variable(d.clone(), s))
        .collect::<Result<_>>()?;
    let l = loss(&vars)?;
    l.backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (d, _))| v.grad().unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let eval = |perturbed_idx: usize, elem: usize, delta: f64| -> Result<f64> {
        let vars: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(j, (d, s))| {
                let mut data = d.clone();
                if j == perturbed_idx {
                    data[elem] += delta;
                }
                Tensor::variable(data, s)
            })
            .collect::<Result<_>>()?;
        loss(&vars)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (j, (d, _)) in inputs.iter().enumerate() {
        for i in 0..d.len() {
            let plus = eval(j, i, h)?;
            let minus = eval(j, i, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j][i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (j, i, a, numeric);
            }
        }
    }
    Ok(report)
}
