//! Central finite-difference checking of analytic gradients.
//!
//! The numeric side only ever evaluates the function on constant inputs,
//! so it shares no backward code with the path it verifies.

use crate::autograd::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub relative_errors: Vec<f64>,
    pub analytic_norms: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn analytic_gradients(inputs: &[Tensor], f: &dyn Fn(&[Var]) -> Var) -> Vec<Tensor> {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::param(t.clone())).collect();
    let out = f(&vars);
    out.backward();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

pub fn numeric_gradients(inputs: &[Tensor], f: &dyn Fn(&[Var]) -> Var, eps: f64) -> Vec<Tensor> {
    let eval = |ts: &[Tensor]| -> f64 {
        let vars: Vec<Var> = ts.iter().map(|t| Var::constant(t.clone())).collect();
        f(&vars).item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].len() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[which].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Compare analytic and central-difference gradients of a scalar function
/// with respect to each input tensor.
pub fn check(inputs: &[Tensor], f: &dyn Fn(&[Var]) -> Var, eps: f64) -> GradCheck {
    let analytic = analytic_gradients(inputs, f);
    let numeric = numeric_gradients(inputs, f, eps);
    let mut relative_errors = Vec::new();
    let mut analytic_norms = Vec::new();
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff = a.zip_map(n, |x, y| x - y).norm();
        let scale = a.norm().max(n.norm());
        relative_errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
        analytic_norms.push(a.norm());
    }
    GradCheck {
        relative_errors,
        analytic_norms,
    }
}
