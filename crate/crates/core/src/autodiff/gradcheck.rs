use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this (in both routes) are compared absolutely.
pub const SMALL_GRADIENT: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over elements whose gradient
    /// magnitude reaches [`SMALL_GRADIENT`].
    pub max_rel_error: f64,
    /// Largest `|a - n|` over the remaining near-zero elements.
    pub max_abs_error: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_error < rel_tol && self.max_abs_error < abs_tol
    }
}

/// Compare the tape gradient of a scalar function against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h`, element by element.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let diff = (a - numeric).abs();
            report.elements += 1;
            if a.abs().max(numeric.abs()) < SMALL_GRADIENT {
                report.max_abs_error = report.max_abs_error.max(diff);
            } else {
                let rel = diff / a.abs().max(numeric.abs()).max(1e-8);
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((k, i));
                }
            }
        }
    }
    Ok(report)
}
