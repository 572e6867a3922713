//! Finite-difference verification of reverse-mode gradients.
//!
//! Used by the test suite to validate every differentiable operation: a
//! scalar-valued function is evaluated with each input element nudged up
//! and down, and the central difference is compared against the gradient
//! produced by [`super::Graph::backward`]. Checks run in `f64`, where a
//! step of ~1e-5 leaves several digits of agreement for smooth ops.

use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of `f` with respect to `inputs[wrt]`.
///
/// `f` must be a pure function of `inputs`; it is re-evaluated twice per
/// element of the chosen input.
pub fn numerical_gradient<F>(f: &F, inputs: &[Tensor<f64>], wrt: usize, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(inputs[wrt].numel());
    for i in 0..inputs[wrt].numel() {
        let mut shifted = inputs.to_vec();
        let mut plus = inputs[wrt].clone();
        plus.data_mut()[i] += eps;
        shifted[wrt] = plus;
        let f_plus = f(&shifted)?;

        let mut minus = inputs[wrt].clone();
        minus.data_mut()[i] -= eps;
        shifted[wrt] = minus;
        let f_minus = f(&shifted)?;

        grad.push((f_plus - f_minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares an analytic gradient against a numerical one element-wise with
/// the tolerance `|a - n| <= atol + rtol * max(|a|, |n|)`. On failure the
/// message names the first offending element.
pub fn compare(
    analytic: &[f64],
    numeric: &[f64],
    atol: f64,
    rtol: f64,
) -> std::result::Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!(
            "gradient length mismatch: analytic {} vs numeric {}",
            analytic.len(),
            numeric.len()
        ));
    }
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = atol + rtol * a.abs().max(n.abs());
        if !(a - n).abs().le(&tol) || !a.is_finite() || !n.is_finite() {
            return Err(format!(
                "gradient element {i}: analytic {a}, numeric {n}, tolerance {tol}"
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Mode};

    #[test]
    fn numerical_gradient_of_quadratic() {
        // f(x) = sum(x^2) -> df/dx = 2x
        let f = |inputs: &[Tensor<f64>]| -> Result<f64> {
            Ok(inputs[0].data().iter().map(|v| v * v).sum())
        };
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let grad = numerical_gradient(&f, &[x], 0, 1e-5).unwrap();
        compare(&[2.0, -4.0, 1.0], &grad, 1e-9, 1e-7).unwrap();
    }

    #[test]
    fn compare_reports_offending_element() {
        let err = compare(&[1.0, 2.0], &[1.0, 2.5], 1e-9, 1e-7).unwrap_err();
        assert!(err.contains("element 1"));
    }

    #[test]
    fn graph_and_numerical_agree_on_composite() {
        let build = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new(Mode::Eval);
            let x = g.constant(inputs[0].clone());
            let t = g.tanh(x)?;
            let s = g.mul(t, t)?;
            let loss = g.mean(s)?;
            g.value(loss).item()
        };
        let x = Tensor::from_vec(&[4], vec![0.3, -0.7, 1.2, 0.0]).unwrap();

        let mut g = Graph::new(Mode::Eval);
        let xv = g.parameter(x.clone());
        let t = g.tanh(xv).unwrap();
        let s = g.mul(t, t).unwrap();
        let loss = g.mean(s).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(xv).unwrap().to_vec();

        let numeric = numerical_gradient(&build, &[x], 0, 1e-5).unwrap();
        compare(&analytic, &numeric, 1e-8, 1e-6).unwrap();
    }
}
