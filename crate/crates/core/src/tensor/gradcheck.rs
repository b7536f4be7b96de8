use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used when callers have no better choice.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely rather than blowing up.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, out, vars))
}

/// Checks the gradient of `f` with respect to every coordinate of every input.
///
/// `f` must be deterministic: it is re-evaluated twice per coordinate.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let (mut tape, out, vars) = eval_scalar(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut probe = inputs.to_vec();
    let mut worst = (0, 0);
    let mut max_rel_error = 0.0f64;
    let mut coordinates = 0;
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let (t, o, _) = eval_scalar(&f, &probe, false)?;
            let plus = t.value(o).data()[0];
            probe[which].data_mut()[i] = orig - eps;
            let (t, o, _) = eval_scalar(&f, &probe, false)?;
            let minus = t.value(o).data()[0];
            probe[which].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(a, numeric);
            if !err.is_finite() || err > max_rel_error {
                max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                worst = (which, i);
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates,
        tol,
        passed: max_rel_error <= tol,
    })
}

/// Single-input convenience wrapper around [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coordinates, 2);
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 7.0]).unwrap();
        let report = grad_check(
            |tape, x| {
                let s = tape.scale(x, 2.5);
                Ok(tape.sum(s))
            },
            &x,
            1e-4,
            1e-9,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::zeros(&[2]);
        let err = grad_check(|_, x| Ok(x), &x, 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn eps_outside_range_rejected() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 1e-2, 1e-4).is_err());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // sigmoid'(x) is not 1; pretend it is by routing through a constant
        let x = Tensor::new(vec![1], vec![0.7]).unwrap();
        let report = grad_check(
            |tape, x| {
                let v = tape.value(x).data()[0];
                let k = tape.constant(Tensor::scalar(v * v));
                let lin = tape.add(x, k)?;
                Ok(tape.sum(lin))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
