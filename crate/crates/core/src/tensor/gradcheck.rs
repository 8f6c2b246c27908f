//! Reverse-mode gradients against central finite differences.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`; the floor keeps
//! coordinates whose true gradient is close to zero from reporting rounding
//! noise as large relative errors.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, TensorError, Var};

/// Default denominator floor for the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-6;
/// Default finite-difference step, scaled by `max(1, |x|)`.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub floor: f64,
    /// Relative step `h / max(1, |x|)`. Smaller steps are less likely to
    /// straddle a ReLU or max-pool kink in large compositions.
    pub step: f64,
    /// Check at most this many coordinates per input (sampled); `None` checks all.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(tolerance: f64) -> Self {
        GradCheckConfig {
            tolerance,
            floor: DEFAULT_FLOOR,
            step: DEFAULT_STEP,
            max_per_input: None,
            seed: 0,
        }
    }
}

/// Coordinate with the largest relative error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks every coordinate of every input. `f` must return a single-element
/// value.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    check_gradients_with(f, inputs, &GradCheckConfig::new(tolerance))
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?.value();
    if out.len() != 1 {
        return Err(TensorError::NotScalar(out.shape().to_vec()));
    }
    Ok(out.item())
}

pub fn check_gradients_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        let value = out.value().item();
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("function value {value}")));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: config.tolerance,
        passed: true,
    };
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        if !grad.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "analytic gradient of input {which}"
            )));
        }
        let len = inputs[which].len();
        let indices: Vec<usize> = match config.max_per_input {
            Some(max) if max < len => {
                let mut v = sample(&mut rng, len, max).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for index in indices {
            let x = inputs[which].data()[index];
            let h = config.step * x.abs().max(1.0);
            work[which].data_mut()[index] = x + h;
            let plus = evaluate(&f, &work)?;
            work[which].data_mut()[index] = x - h;
            let minus = evaluate(&f, &work)?;
            work[which].data_mut()[index] = x;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "finite difference at input {which} index {index}"
                )));
            }
            let a = grad.data()[index];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(config.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(WorstCoordinate {
                    input: which,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_error < config.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_fn(&[5], |i| i as f64);
        let report =
            check_gradients(|tape, _| Ok(tape.constant(Tensor::scalar(3.0))), &[x], 1e-9).unwrap();
        assert_eq!(report.max_abs_error, 0.0);
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
        assert_eq!(report.checked, 5);
    }

    #[test]
    fn detects_wrong_gradient() {
        // the detached copy contributes to the value but not to the gradient
        let x = Tensor::from_fn(&[3], |i| i as f64 + 1.0);
        let report = check_gradients(
            |tape, v| {
                let detached = tape.constant((*v[0].value()).clone());
                crate::tensor::aggregate(
                    crate::tensor::AggregateOp::Sum,
                    &[v[0].sum(), detached.sum()],
                )
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(!report.passed);
        let worst = report.worst.unwrap();
        assert!((worst.analytic - 1.0).abs() < 1e-12);
        assert!((worst.numeric - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::scalar(1.0);
        let err = check_gradients(|_, v| Ok(v[0].scale(f64::INFINITY)), &[x], 1e-6).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }
}
