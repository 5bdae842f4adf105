//! Central finite-difference gradient oracle.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it is used to check.

use crate::error::Result;
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every element of
/// `inputs[which]`.
pub fn numeric_gradient(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    which: usize,
    h: f64,
) -> Result<Tensor<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let n = inputs[which].numel();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work[which].data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work[which].data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(inputs[which].shape(), grad)
}

/// Largest elementwise `|a - n| / (|n| + 1e-8)`.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// `‖a - n‖₂ / (‖n‖₂ + 1e-8)` over a whole tensor.
pub fn norm_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        diff += (a - n) * (a - n);
        norm += n * n;
    }
    diff.sqrt() / (norm.sqrt() + 1e-8)
}

/// Builds a scalar from a graph over `inputs` (all recorded as gradient
/// leaves) and compares tape gradients against central differences.
/// Returns the max elementwise relative error per input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(build(&tape, &vars)?.value().item())
    };
    let mut errs = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_gradient(&eval, inputs, i, h)?;
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        errs.push(max_relative_error(&analytic, &numeric));
    }
    Ok(errs)
}

/// `Σ out ⊙ w` for a fixed weight tensor; turns any output into a scalar
/// whose gradient exercises every output element.
pub fn weighted_sum<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let w = out.tape().constant(weights.clone());
    Ok(out.mul(w)?.sum())
}

/// Per-parameter comparison produced by [`check_params`].
#[derive(Debug, Clone)]
pub struct ParamGradError {
    pub name: String,
    /// Largest elementwise relative error.
    pub max_rel: f64,
    /// Norm-wise relative error over the whole tensor.
    pub norm_rel: f64,
    pub grad_norm: f64,
}

/// Compares tape gradients of every parameter in `store` against central
/// differences of the scalar returned by `build`.
pub fn check_params<F>(store: &ParamStore<f64>, build: F, h: f64) -> Result<Vec<ParamGradError>>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let loss = build(&tape, &bound)?;
    let grads = tape.backward(loss)?;

    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let base = store.get(id).clone();
        let mut numeric = Vec::with_capacity(base.numel());
        for i in 0..base.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                work.set(id, t)?;
                let tape = Tape::new();
                let bound = work.bind(&tape, false);
                Ok(build(&tape, &bound)?.value().item())
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            numeric.push((plus - minus) / (2.0 * h));
        }
        work.set(id, base.clone())?;
        let numeric = Tensor::new(base.shape(), numeric)?;
        let analytic = grads
            .get(bound.var(id))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        out.push(ParamGradError {
            name: store.name(id).to_string(),
            max_rel: max_relative_error(&analytic, &numeric),
            norm_rel: norm_relative_error(&analytic, &numeric),
            grad_norm: numeric.data().iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(out)
}

/// Adds Gaussian noise of scale `std` to every parameter. Gradient checks
/// run on the result: at the small default init many gradients sit near the
/// round-off floor of central differences.
pub fn jitter_params<R: rand::Rng + ?Sized>(store: &mut ParamStore<f64>, std: f64, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let noise = Tensor::<f64>::randn(t.shape(), std, rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}
