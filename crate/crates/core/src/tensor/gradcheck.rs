use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`]. Central differences at `h = 1e-5`
/// carry rounding noise around `1e-11 · |f|`; for parameters whose gradient is
/// exactly zero (attention key biases) that noise must stay below
/// `1e-4 · floor`, so checked losses should be scaled to |f| ≲ 1e-2.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a − b| / max(RELATIVE_ERROR_FLOOR, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_relative_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one parameter leaf per entry of `params`, and
/// must return the scalar loss node.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for (index, (var, param)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.wrt(*var, param);
        let mut check = ParamCheck {
            index,
            max_relative_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for e in 0..param.numel() {
            let original = param.data()[e];
            work[index].data_mut()[e] = original + h;
            let plus = eval(&work)?;
            work[index].data_mut()[e] = original - h;
            let minus = eval(&work)?;
            work[index].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[e], numeric);
            if err > check.max_relative_error || !err.is_finite() {
                check.max_relative_error = err;
                check.worst_element = e;
                check.analytic = analytic.data()[e];
                check.numeric = numeric;
            }
        }
        check.passed = check.max_relative_error < tolerance;
        report.params.push(check);
    }
    Ok(report)
}
