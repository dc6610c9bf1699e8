use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Location and values of the worst entry found by [`grad_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// largest `|analytic - numeric|` over all entries
    pub max_abs_error: f64,
    /// input index and flat element index of the worst entry
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central finite differences at `inputs`.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs).map(|r| r.max_rel_error)
}

/// [`grad_check`] with the position of the worst entry.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Usage("grad_check needs a scalar function".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + GRAD_CHECK_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - GRAD_CHECK_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || rel.is_nan() {
                report = GradCheckReport {
                    max_rel_error: rel,
                    max_abs_error: report.max_abs_error,
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
