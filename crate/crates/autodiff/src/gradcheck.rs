//! Central finite-difference verification of analytic gradients.

use crate::var::{grad, Tensor, Var};

/// Gradient magnitudes below this (times `max(1, |f|)`) count as zero when
/// scaling errors; finite-difference round-off lives well below it.
pub const ERROR_FLOOR: f64 = 1e-6;

/// Largest elementwise deviation, scaled by the larger of the two gradients'
/// peak magnitudes (floored at [`ERROR_FLOOR`]).
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    relative_error_with_floor(analytic, numeric, ERROR_FLOOR)
}

pub fn relative_error_with_floor(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(floor, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

/// Derivative of `f` with respect to every element of `inputs[which]`.
pub fn numeric_gradient(
    f: &dyn Fn(&[Var]) -> Var,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Tensor {
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut out = Tensor::zeros(inputs[which].raw_dim());
    // inputs stay differentiable so that `f` may take inner gradients
    let eval = |probe: &[Tensor]| -> f64 {
        let vars: Vec<Var> = probe.iter().cloned().map(Var::param).collect();
        f(&vars).value().sum()
    };
    let n = inputs[which].len();
    for i in 0..n {
        let orig = flat(&probe[which])[i];
        flat_mut(&mut probe[which])[i] = orig + step;
        let plus = eval(&probe);
        flat_mut(&mut probe[which])[i] = orig - step;
        let minus = eval(&probe);
        flat_mut(&mut probe[which])[i] = orig;
        flat_mut(&mut out)[i] = (plus - minus) / (2.0 * step);
    }
    out
}

/// Analytic gradients of `f` (summed over its output) for every input.
pub fn analytic_gradients(f: &dyn Fn(&[Var]) -> Var, inputs: &[Tensor]) -> Vec<Tensor> {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let out = f(&vars);
    let wrt: Vec<&Var> = vars.iter().collect();
    grad(&out, &wrt, false)
        .into_iter()
        .map(Var::into_value)
        .collect()
}

/// Relative error per input of `f`.
pub fn check_gradients(f: &dyn Fn(&[Var]) -> Var, inputs: &[Tensor], step: f64) -> Vec<f64> {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
    let out = f(&vars);
    let floor = ERROR_FLOOR * out.value().sum().abs().max(1.0);
    let wrt: Vec<&Var> = vars.iter().collect();
    let analytic: Vec<Tensor> = grad(&out, &wrt, false)
        .into_iter()
        .map(Var::into_value)
        .collect();
    (0..inputs.len())
        .map(|i| {
            let numeric = numeric_gradient(f, inputs, i, step);
            relative_error_with_floor(&analytic[i], &numeric, floor)
        })
        .collect()
}

fn flat(t: &Tensor) -> &[f64] {
    t.as_slice().expect("standard layout tensor")
}

fn flat_mut(t: &mut Tensor) -> &mut [f64] {
    t.as_slice_mut().expect("standard layout tensor")
}
