use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// elements whose absolute error exceeds `abs_tol`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Differentiates the scalar built by `f` from leaves holding `inputs` and
/// compares every gradient entry with a central difference of width
/// `2 * step`.
pub fn gradient_check<F>(inputs: &[Tensor], step: f64, abs_tol: f64, f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zero);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(err);
            if err > abs_tol {
                report.max_rel_err = report.max_rel_err.max(err / a.abs().max(numeric.abs()));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
