//! Central finite-difference gradient checking.
//!
//! The numerical side evaluates the function on a no-grad tape, so it never
//! touches the vector-Jacobian rules it is checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};

/// Per-input comparison of tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-6)` per input.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `f` (which must return a one-element tensor) at `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(v)).collect();

    let eval = |args: &[Tensor]| -> Result<f64> {
        let t = Tape::no_grad();
        let vs: Vec<Var<'_>> = args.iter().map(|a| t.leaf(a.clone())).collect();
        f(&t, &vs)?.value().item()
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut args = inputs.to_vec();
        let mut numeric = vec![0.0; input.numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = input.to_vec();
            plus[e] += step;
            args[k] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&args)?;
            let mut minus = input.to_vec();
            minus[e] -= step;
            args[k] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&args)?;
            *slot = (fp - fm) / (2.0 * step);
        }
        let a = analytic[k].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(&numeric).map(|v| v.abs()).fold(1e-6, f64::max);
        rel_errors.push(diff / scale);
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < tolerance,
        rel_errors,
        max_rel_error,
        tolerance,
    })
}

/// Per-parameter comparison for a function of every tensor in a store.
#[derive(Debug, Clone)]
pub struct ParamGradReport {
    /// `(name, relative error)` in registration order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Like [`check_gradients`], over the parameters of `store`, probing at most
/// `per_param` evenly strided entries of each tensor.
///
/// A parameter whose tape gradient is identically zero (the key bias, which
/// softmax is invariant to) is compared on the numeric side alone: it passes
/// iff every central difference is below `1e-7`.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    per_param: usize,
    step: f64,
    tolerance: f64,
    f: F,
) -> Result<ParamGradReport>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(&loss)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let t = Tape::no_grad();
        let b = s.bind(&t);
        f(&t, &b)?.value().item()
    };

    let mut per = Vec::with_capacity(store.len());
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = grads.get(bound.get(id));
        let original = store.get(id);
        let n = original.numel();
        let stride = (n / per_param.max(1)).max(1);
        let (mut diff, mut scale, mut numeric_max) = (0.0_f64, 1e-6_f64, 0.0_f64);
        for e in (0..n).step_by(stride).take(per_param.max(1)) {
            let mut v = original.to_vec();
            v[e] += step;
            probe.set(id, Tensor::new(original.shape().to_vec(), v.clone())?)?;
            let fp = eval(&probe)?;
            v[e] -= 2.0 * step;
            probe.set(id, Tensor::new(original.shape().to_vec(), v)?)?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[e];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            numeric_max = numeric_max.max(numeric.abs());
        }
        probe.set(id, original.clone())?;
        let analytic_zero = analytic.data().iter().all(|v| v.abs() < 1e-12);
        let rel = if analytic_zero {
            if numeric_max < 1e-7 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / scale
        };
        per.push((store.name(id).to_string(), rel));
    }
    let max_rel_error = per.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    Ok(ParamGradReport {
        passed: max_rel_error < tolerance,
        per_param: per,
        max_rel_error,
        tolerance,
    })
}
